//! Conditional noise-prediction network.
//!
//! The network treats a D-dimensional vector as a one-channel signal of
//! length D. A 1x1 input convolution lifts it to `residual_channels`, a
//! stack of gated residual blocks with circular dilated convolutions mixes
//! neighbouring entities, and the summed skip outputs pass through two 1x1
//! convolutions to produce the noise estimate.
//!
//! Each block receives two conditioning signals:
//! * the encoder state, up-sampled by a two-layer MLP to a length-D signal
//!   and projected to `2 * residual_channels` by a 1x1 convolution;
//! * the Fourier embedding of the noise index, passed through a two-layer
//!   MLP and projected per block, broadcast over all D positions.

use crate::diffusion::{EpsilonModel, NoiseLevel};
use crate::error::{Error, Result};
use crate::numcore::{init_linear, linear, Graph, ParameterSet, RngStream, Tensor, Var};

const PREFIX: &str = "denoiser";

/// Transformer-style sinusoidal embedding of the noise index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseEmbeddingTable {
    pub max_index: usize,
    pub dim: usize,
}

impl Default for NoiseEmbeddingTable {
    fn default() -> Self {
        NoiseEmbeddingTable {
            max_index: 500,
            dim: 32,
        }
    }
}

impl NoiseEmbeddingTable {
    /// Component `2j` is `sin(n / max^(2j/dim))`, component `2j+1` the
    /// matching cosine.
    pub fn embed(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 || n > self.max_index {
            return Err(Error::Contract(format!(
                "noise index {n} outside 1..={}",
                self.max_index
            )));
        }
        let mut out = vec![0.0; self.dim];
        self.fill(n as f64, &mut out);
        Ok(out)
    }

    fn fill(&self, n: f64, out: &mut [f64]) {
        let max = self.max_index as f64;
        for j in 0..self.dim / 2 {
            let arg = n / max.powf(2.0 * j as f64 / self.dim as f64);
            out[2 * j] = arg.sin();
            out[2 * j + 1] = arg.cos();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Number of series (spatial length).
    pub dim: usize,
    /// Size of the conditioning vector (encoder hidden size).
    pub cond_dim: usize,
    pub residual_channels: usize,
    pub residual_layers: usize,
    /// Period of the dilation pattern: block `i` uses `2^(i % cycle)`.
    pub dilation_cycle: usize,
    pub embedding: NoiseEmbeddingTable,
}

impl DenoiserConfig {
    pub fn new(dim: usize, cond_dim: usize) -> Self {
        DenoiserConfig {
            dim,
            cond_dim,
            residual_channels: 8,
            residual_layers: 8,
            dilation_cycle: 2,
            embedding: NoiseEmbeddingTable::default(),
        }
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << (block % self.dilation_cycle)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.cond_dim == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.residual_channels == 0 || self.residual_layers == 0 || self.dilation_cycle == 0 {
            return Err(Error::Config("denoiser channel/layer counts must be positive".into()));
        }
        if self.embedding.dim == 0 || !self.embedding.dim.is_multiple_of(2) {
            return Err(Error::Config("noise embedding dimension must be even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
}

fn pname(part: &str) -> String {
    format!("{PREFIX}.{part}")
}

fn block_name(i: usize, part: &str) -> String {
    format!("{PREFIX}.block{i}.{part}")
}

fn init_conv(
    params: &mut ParameterSet,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<()> {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    params.insert_uniform(format!("{prefix}.weight"), &[cout, cin, k], bound, rng)?;
    params.insert_uniform(format!("{prefix}.bias"), &[cout, 1], bound, rng)
}

impl Denoiser {
    /// Registers all weights in `params`. The last convolution is zero
    /// initialised so a fresh network predicts zero noise.
    pub fn init(cfg: DenoiserConfig, params: &mut ParameterSet, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.residual_channels;
        let e = cfg.embedding.dim;
        let h = cfg.cond_dim;
        init_conv(params, &pname("input"), c, 1, 1, rng)?;
        init_linear(params, &pname("embed.fc1"), e, e, rng)?;
        init_linear(params, &pname("embed.fc2"), e, e, rng)?;
        init_linear(params, &pname("cond.fc1"), h, h, rng)?;
        init_linear(params, &pname("cond.fc2"), h, cfg.dim, rng)?;
        for i in 0..cfg.residual_layers {
            init_conv(params, &block_name(i, "dilated"), 2 * c, c, 3, rng)?;
            init_conv(params, &block_name(i, "cond"), 2 * c, 1, 1, rng)?;
            init_linear(params, &block_name(i, "noise"), e, 2 * c, rng)?;
            init_conv(params, &block_name(i, "output"), 2 * c, c, 1, rng)?;
        }
        init_conv(params, &pname("skip"), c, c, 1, rng)?;
        params.insert(pname("output.weight"), Tensor::zeros([1, c, 1]))?;
        params.insert(pname("output.bias"), Tensor::zeros([1, 1]))?;
        Ok(Denoiser { cfg })
    }

    /// Wraps an existing parameter set (e.g. loaded from a checkpoint),
    /// checking that every expected weight is present with the right shape.
    pub fn from_params(cfg: DenoiserConfig, params: &ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let mut reference = ParameterSet::new();
        Denoiser::init(cfg.clone(), &mut reference, &mut RngStream::new(0))?;
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::dimension(name, t.shape(), p.shape())),
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        Ok(Denoiser { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn bind<'a>(&'a self, params: &'a ParameterSet) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, params }
    }

    fn conv(&self, g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
        let w = g.param(params, &format!("{prefix}.weight"))?;
        let b = g.param(params, &format!("{prefix}.bias"))?;
        let y = g.conv1d_circular(x, w, dilation)?;
        g.add(y, b)
    }

    /// Noise-level embedding after the two-layer MLP: (batch, emb_dim).
    pub fn embed_levels(&self, g: &mut Graph, params: &ParameterSet, levels: &[NoiseLevel]) -> Result<Var> {
        let e = self.cfg.embedding.dim;
        let mut table = vec![0.0; levels.len() * e];
        for (row, n) in table.chunks_mut(e).zip(levels) {
            if n.get() > self.cfg.embedding.max_index {
                return Err(Error::Contract(format!(
                    "noise index {} exceeds embedding range {}",
                    n.get(),
                    self.cfg.embedding.max_index
                )));
            }
            self.cfg.embedding.fill(n.get() as f64, row);
        }
        let x = g.constant(Tensor::new(vec![levels.len(), e], table)?);
        let x = linear(g, params, &pname("embed.fc1"), x)?;
        let x = g.softplus(x)?;
        let x = linear(g, params, &pname("embed.fc2"), x)?;
        g.softplus(x)
    }

    /// Up-samples the encoder state (batch, cond_dim) to a one-channel
    /// signal (batch, 1, D).
    pub fn upsample_condition(&self, g: &mut Graph, params: &ParameterSet, cond: Var) -> Result<Var> {
        let rows = g.shape(cond)[0];
        let x = linear(g, params, &pname("cond.fc1"), cond)?;
        let x = g.tanh(x)?;
        let x = linear(g, params, &pname("cond.fc2"), x)?;
        g.reshape(x, &[rows, 1, self.cfg.dim])
    }

    /// One gated residual block.
    ///
    /// `x` is (batch, C, D), `cond` is (batch, 1, D) and `emb` is
    /// (batch, emb_dim), or (1, emb_dim) when shared by every row. Returns `(residual, skip)`, both (batch, C, D).
    pub fn residual_block_forward(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        block: usize,
        x: Var,
        cond: Var,
        emb: Var,
    ) -> Result<(Var, Var)> {
        let c = self.cfg.residual_channels;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != c {
            return Err(Error::dimension(format!("residual block {block}"), &shape, &[c]));
        }
        let (rows, len) = (shape[0], shape[2]);
        if g.shape(cond) != [rows, 1, len] {
            return Err(Error::dimension(
                format!("residual block {block} conditioning"),
                &shape,
                g.shape(cond),
            ));
        }
        let dilated = self.conv(g, params, &block_name(block, "dilated"), x, self.cfg.dilation(block))?;
        let cproj = self.conv(g, params, &block_name(block, "cond"), cond, 1)?;
        let nproj = linear(g, params, &block_name(block, "noise"), emb)?;
        let erows = g.shape(emb)[0];
        let nproj = g.reshape(nproj, &[erows, 2 * c, 1])?;
        let pre = g.add(dilated, cproj)?;
        let pre = g.add(pre, nproj)?;
        let gate = g.slice(pre, 1, 0, c)?;
        let filter = g.slice(pre, 1, c, c)?;
        let gate = g.sigmoid(gate)?;
        let filter = g.tanh(filter)?;
        let act = g.mul(gate, filter)?;
        let out = self.conv(g, params, &block_name(block, "output"), act, 1)?;
        let res = g.slice(out, 1, 0, c)?;
        let skip = g.slice(out, 1, c, c)?;
        let res = g.add(x, res)?;
        let res = g.scale(res, std::f64::consts::FRAC_1_SQRT_2)?;
        Ok((res, skip))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        xn: Var,
        cond: Var,
        levels: &[NoiseLevel],
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let rows = match *g.shape(xn) {
            [r, dd] if dd == d => r,
            ref s => return Err(Error::dimension("denoiser input", s, &[levels.len(), d])),
        };
        if levels.len() != rows || g.shape(cond) != [rows, self.cfg.cond_dim] {
            return Err(Error::dimension(
                "denoiser conditioning",
                g.shape(cond),
                &[rows, self.cfg.cond_dim],
            ));
        }
        // sampling uses one level for the whole batch
        let shared = levels.windows(2).all(|w| w[0] == w[1]);
        let emb = self.embed_levels(g, params, if shared { &levels[..1] } else { levels })?;
        let up = self.upsample_condition(g, params, cond)?;
        let x = g.reshape(xn, &[rows, 1, d])?;
        let mut x = self.conv(g, params, &pname("input"), x, 1)?;
        let mut skips = Vec::with_capacity(self.cfg.residual_layers);
        for i in 0..self.cfg.residual_layers {
            let (res, skip) = self.residual_block_forward(g, params, i, x, up, emb)?;
            x = res;
            skips.push(skip);
        }
        let mut total = skips[0];
        for &s in &skips[1..] {
            total = g.add(total, s)?;
        }
        let total = g.scale(total, 1.0 / (self.cfg.residual_layers as f64).sqrt())?;
        let y = self.conv(g, params, &pname("skip"), total, 1)?;
        let y = g.softplus(y)?;
        let y = self.conv(g, params, &pname("output"), y, 1)?;
        g.reshape(y, &[rows, d])
    }
}

/// A [`Denoiser`] together with the parameters it reads.
#[derive(Clone, Copy)]
pub struct BoundDenoiser<'a> {
    net: &'a Denoiser,
    params: &'a ParameterSet,
}

impl EpsilonModel for BoundDenoiser<'_> {
    fn dim(&self) -> usize {
        self.net.cfg.dim
    }

    fn predict(&self, g: &mut Graph, xn: Var, cond: Var, levels: &[NoiseLevel]) -> Result<Var> {
        self.net.forward(g, self.params, xn, cond, levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels(n: usize, rows: usize) -> Vec<NoiseLevel> {
        (0..rows).map(|_| NoiseLevel::new(n, 500).unwrap()).collect()
    }

    #[test]
    fn embedding_shape_range_and_injectivity() {
        let t = NoiseEmbeddingTable::default();
        let all: Vec<Vec<f64>> = (1..=500).map(|n| t.embed(n).unwrap()).collect();
        for e in &all {
            assert_eq!(e.len(), 32);
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "n={} and n={} collide", i + 1, j + 1);
            }
        }
        assert!(t.embed(0).is_err() && t.embed(501).is_err());
    }

    #[test]
    fn embedding_first_components() {
        let t = NoiseEmbeddingTable::default();
        let (a, b) = (t.embed(1).unwrap(), t.embed(2).unwrap());
        assert_eq!(b[0] - a[0], 2f64.sin() - 1f64.sin());
        let mut near_zero = vec![0.0; 32];
        t.fill(1e-12, &mut near_zero);
        assert!((near_zero[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dilation_pattern() {
        let cfg = DenoiserConfig::new(4, 40);
        let d: Vec<usize> = (0..8).map(|i| cfg.dilation(i)).collect();
        assert_eq!(d, vec![1, 2, 1, 2, 1, 2, 1, 2]);
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let mut rng = RngStream::new(1);
        for d in [1, 2, 8, 963] {
            let mut params = ParameterSet::new();
            let net = Denoiser::init(DenoiserConfig::new(d, 40), &mut params, &mut rng).unwrap();
            let mut g = Graph::new();
            let x = g.constant(rng.gaussian(&[3, d]));
            let h = g.constant(rng.gaussian(&[3, 40]));
            let y = net.forward(&mut g, &params, x, h, &levels(7, 3)).unwrap();
            assert_eq!(g.shape(y), &[3, d]);
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut params = ParameterSet::new();
        let net = Denoiser::init(DenoiserConfig::new(4, 6), &mut params, &mut RngStream::new(2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 5]));
        let h = g.constant(Tensor::zeros([1, 6]));
        assert!(matches!(
            net.forward(&mut g, &params, x, h, &levels(1, 1)),
            Err(Error::Dimension { .. })
        ));
    }

    fn zero_biases(params: &mut ParameterSet) {
        let names: Vec<String> = params
            .names()
            .filter(|n| n.ends_with(".bias"))
            .map(String::from)
            .collect();
        for n in names {
            let shape = params.get(&n).unwrap().shape().to_vec();
            params.set(&n, Tensor::zeros(shape)).unwrap();
        }
    }

    #[test]
    fn block_with_zero_inputs_outputs_zero() {
        let mut params = ParameterSet::new();
        let net = Denoiser::init(DenoiserConfig::new(5, 4), &mut params, &mut RngStream::new(3)).unwrap();
        zero_biases(&mut params);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 8, 5]));
        let c = g.constant(Tensor::zeros([2, 1, 5]));
        let e = g.constant(Tensor::zeros([2, 32]));
        let (r, s) = net.residual_block_forward(&mut g, &params, 0, x, c, e).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    fn roll(t: &Tensor, shift: usize) -> Tensor {
        let len = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for (row_in, row_out) in t.data().chunks(len).zip(out.chunks_mut(len)) {
            for d in 0..len {
                row_out[(d + shift) % len] = row_in[d];
            }
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    }

    #[test]
    fn block_is_shift_equivariant() {
        let mut params = ParameterSet::new();
        let mut rng = RngStream::new(4);
        let net = Denoiser::init(DenoiserConfig::new(7, 4), &mut params, &mut rng).unwrap();
        let xt = rng.gaussian(&[2, 8, 7]);
        let et = rng.gaussian(&[2, 32]);
        // constant conditioning across positions
        let ct = Tensor::new([2, 1, 7], [vec![0.3; 7], vec![-1.1; 7]].concat()).unwrap();
        for block in [0, 1] {
            let run = |x: &Tensor| {
                let mut g = Graph::new();
                let (xv, cv, ev) = (g.constant(x.clone()), g.constant(ct.clone()), g.constant(et.clone()));
                let (r, s) = net.residual_block_forward(&mut g, &params, block, xv, cv, ev).unwrap();
                (g.value(r).clone(), g.value(s).clone())
            };
            let (r0, s0) = run(&xt);
            let (r1, s1) = run(&roll(&xt, 3));
            for (a, b) in roll(&r0, 3).data().iter().zip(r1.data()) {
                assert!((a - b).abs() < 1e-14);
            }
            for (a, b) in roll(&s0, 3).data().iter().zip(s1.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn every_block_feeds_the_output() {
        let mut params = ParameterSet::new();
        let mut rng = RngStream::new(5);
        let net = Denoiser::init(DenoiserConfig::new(6, 5), &mut params, &mut rng).unwrap();
        params.set("denoiser.output.weight", rng.gaussian(&[1, 8, 1])).unwrap();
        let x = rng.gaussian(&[2, 6]);
        let h = rng.gaussian(&[2, 5]);
        let run = |p: &ParameterSet| {
            let mut g = Graph::new();
            let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
            let y = net.forward(&mut g, p, xv, hv, &levels(3, 2)).unwrap();
            g.value(y).clone()
        };
        let base = run(&params);
        for i in 0..8 {
            let mut p = params.clone();
            let name = format!("denoiser.block{i}.output.weight");
            let mut w = p.get(&name).unwrap().clone();
            // zero the skip half (output channels 8..16)
            for o in 8..16 {
                for c in 0..8 {
                    w.data_mut()[o * 8 + c] = 0.0;
                }
            }
            let bname = format!("denoiser.block{i}.output.bias");
            let mut b = p.get(&bname).unwrap().clone();
            b.data_mut()[8..16].iter_mut().for_each(|v| *v = 0.0);
            p.set(&name, w).unwrap();
            p.set(&bname, b).unwrap();
            assert_ne!(run(&p), base, "block {i} skip path is disconnected");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut params = ParameterSet::new();
        let mut rng = RngStream::new(6);
        let net = Denoiser::init(DenoiserConfig::new(3, 4), &mut params, &mut rng).unwrap();
        params.set("denoiser.output.weight", rng.gaussian(&[1, 8, 1])).unwrap();
        let x = rng.gaussian(&[4, 3]);
        let h = rng.gaussian(&[4, 4]);
        let run = || {
            let mut g = Graph::new();
            let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
            let y = net.forward(&mut g, &params, xv, hv, &levels(50, 4)).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
