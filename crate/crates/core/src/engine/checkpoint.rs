//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TMGRDCK1"
//! version  u32
//! config   u32 length + UTF-8 `key=value` lines
//! count    u32
//! count x { u32 name length, name bytes, u32 rank, rank x u64 dims, f64 data }
//! ```

use std::path::Path;

use super::{ModelConfig, TimeGrad};
use crate::denoiser::NoiseEmbeddingTable;
use crate::error::{Error, Result};
use crate::numcore::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMGRDCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with its training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TimeGrad,
    pub best_val_loss: f64,
    pub seed: u64,
}

fn config_block(ck: &Checkpoint) -> String {
    let c = ck.model.config();
    let lags: Vec<String> = c.lags.iter().map(|l| l.to_string()).collect();
    let entries: Vec<(&str, String)> = vec![
        ("dim", c.dim.to_string()),
        ("freq", c.freq.as_str().to_string()),
        ("prediction_steps", c.prediction_steps.to_string()),
        ("lags", lags.join(",")),
        ("scaling", c.scaling.to_string()),
        ("cell", c.cell.as_str().to_string()),
        ("layers", c.layers.to_string()),
        ("hidden", c.hidden.to_string()),
        ("residual_channels", c.residual_channels.to_string()),
        ("residual_layers", c.residual_layers.to_string()),
        ("dilation_cycle", c.dilation_cycle.to_string()),
        ("noise_embedding_max", c.noise_embedding.max_index.to_string()),
        ("noise_embedding_dim", c.noise_embedding.dim.to_string()),
        ("entity_embedding", c.entity_embedding.to_string()),
        ("diffusion_steps", c.diffusion_steps.to_string()),
        ("beta_1", format!("{:?}", c.beta_1)),
        ("beta_n", format!("{:?}", c.beta_n)),
        ("seed", ck.seed.to_string()),
        ("best_val_loss", format!("{:?}", ck.best_val_loss)),
    ];
    entries.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

struct ConfigFields(Vec<(String, String)>);

impl ConfigFields {
    fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CheckpointFormat(format!("bad config line {line:?}")))?;
            out.push((k.to_string(), v.to_string()));
        }
        Ok(ConfigFields(out))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::CheckpointFormat(format!("config is missing {key}")))?;
        raw.parse()
            .map_err(|_| Error::CheckpointFormat(format!("config value {key}={raw:?} is invalid")))
    }
}

fn parse_config(text: &str) -> Result<(ModelConfig, u64, f64)> {
    let f = ConfigFields::parse(text)?;
    let lags_raw: String = f.get("lags")?;
    let lags = lags_raw
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::CheckpointFormat(format!("bad lags {lags_raw:?}")))?;
    let freq: String = f.get("freq")?;
    let cell: String = f.get("cell")?;
    let cfg = ModelConfig {
        dim: f.get("dim")?,
        freq: freq
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("bad frequency {freq}")))?,
        prediction_steps: f.get("prediction_steps")?,
        lags,
        scaling: f.get("scaling")?,
        cell: cell
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("bad cell {cell}")))?,
        layers: f.get("layers")?,
        hidden: f.get("hidden")?,
        residual_channels: f.get("residual_channels")?,
        residual_layers: f.get("residual_layers")?,
        dilation_cycle: f.get("dilation_cycle")?,
        noise_embedding: NoiseEmbeddingTable {
            max_index: f.get("noise_embedding_max")?,
            dim: f.get("noise_embedding_dim")?,
        },
        entity_embedding: f.get("entity_embedding")?,
        diffusion_steps: f.get("diffusion_steps")?,
        beta_1: f.get("beta_1")?,
        beta_n: f.get("beta_n")?,
    };
    Ok((cfg, f.get("seed")?, f.get("best_val_loss")?))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::CheckpointFormat(format!("{what} too large")))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let block = config_block(ck);
    out.extend_from_slice(&len_u32(block.len(), "config block")?.to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    let params = ck.model.params();
    out.extend_from_slice(&len_u32(params.len(), "parameter count")?.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&len_u32(name.len(), "parameter name")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointTruncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| Error::CheckpointFormat("config block is not UTF-8".into()))?;
    let (cfg, seed, best_val_loss) = parse_config(text)?;
    let count = r.u32("parameter count")? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let nlen = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "parameter name")?)
            .map_err(|_| Error::CheckpointFormat("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        if rank > 8 {
            return Err(Error::CheckpointFormat(format!("{name} has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64(&format!("shape of {name}")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::CheckpointFormat(format!("{name} has invalid shape {shape:?}")))?;
        let bytes = numel
            .checked_mul(8)
            .ok_or_else(|| Error::CheckpointFormat(format!("{name} is too large")))?;
        let raw = r.take(bytes, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after the last parameter",
            buf.len() - r.pos
        )));
    }
    let model = TimeGrad::from_params(cfg, params)?;
    Ok(Checkpoint {
        model,
        best_val_loss,
        seed,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
