//! Layered run configuration: defaults, a flat `section.key = value` file,
//! `TIMEGRAD_<SECTION>_<KEY>` environment variables, then command-line
//! overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use timegrad::encoder::CellKind;
use timegrad::engine::{ModelConfig, TrainConfig};
use timegrad::pipeline::{default_lags, DatasetFormat, Frequency};
use timegrad::{Error, Result};

pub const ENV_PREFIX: &str = "TIMEGRAD_";

/// Every accepted key with a short description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.path", "dataset file"),
    ("data.format", "csv_wide | jsonlines"),
    (
        "data.test_windows",
        "trailing windows held out for backtesting (0 = forecast past the end)",
    ),
    (
        "model.prediction_steps",
        "forecast horizon; the context has the same length",
    ),
    ("model.cell", "lstm | gru"),
    ("model.layers", "recurrent layers"),
    ("model.hidden", "recurrent hidden size"),
    ("model.residual_layers", "denoiser residual blocks"),
    ("model.residual_channels", "denoiser channels"),
    ("model.dilation_cycle", "block i uses dilation 2^(i mod cycle)"),
    ("model.diffusion_steps", "diffusion length N"),
    ("model.beta_1", "first noise variance"),
    ("model.beta_n", "last noise variance"),
    ("model.entity_embedding", "per-entity embedding width (0 disables)"),
    ("model.scaling", "divide each window by its context mean"),
    (
        "covariates.lags",
        "comma-separated lags, must include 1 (default by frequency)",
    ),
    ("train.learning_rate", "Adam learning rate"),
    ("train.batch_size", "windows per batch"),
    ("train.max_epochs", "epoch limit"),
    ("train.batches_per_epoch", "batches per epoch"),
    ("train.patience", "epochs without improvement before stopping"),
    ("train.seed", "training seed"),
    (
        "train.validation_repeats",
        "copies of the validation window per evaluation",
    ),
    ("forecast.samples", "trajectories per window (S)"),
    ("forecast.quantiles", "comma-separated increasing levels in (0, 1)"),
    ("forecast.seed", "sampling seed"),
    ("ablation.n_list", "comma-separated diffusion lengths"),
    ("ablation.repeats", "independent runs per length"),
    ("ablation.parallel", "run lengths on separate threads"),
    ("generate.kind", "var | ar1"),
    ("generate.length", "rows to generate"),
    ("generate.freq", "D | H | 30min"),
    ("output.dir", "directory receiving every output file"),
];

/// Where a key's effective value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    File,
    Env,
    Flag,
}

impl Source {
    fn describe(self) -> &'static str {
        match self {
            Source::File => "config file",
            Source::Env => "environment",
            Source::Flag => "command line",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Var,
    Ar1,
}

impl FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "var" => Ok(SyntheticKind::Var),
            "ar1" => Ok(SyntheticKind::Ar1),
            _ => Err("expected var or ar1".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub data_format: DatasetFormat,
    pub test_windows: usize,
    pub prediction_steps: usize,
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub residual_layers: usize,
    pub residual_channels: usize,
    pub dilation_cycle: usize,
    pub diffusion_steps: usize,
    pub beta_1: f64,
    pub beta_n: f64,
    pub entity_embedding: usize,
    pub scaling: bool,
    pub lags: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub samples: usize,
    pub quantiles: Vec<f64>,
    pub forecast_seed: u64,
    pub n_list: Vec<usize>,
    pub repeats: usize,
    pub parallel: bool,
    pub generate_kind: SyntheticKind,
    pub generate_length: usize,
    pub generate_freq: Frequency,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, Frequency::Hour, 24);
        RunConfig {
            data_path: None,
            data_format: DatasetFormat::CsvWide,
            test_windows: 0,
            prediction_steps: m.prediction_steps,
            cell: m.cell,
            layers: m.layers,
            hidden: m.hidden,
            residual_layers: m.residual_layers,
            residual_channels: m.residual_channels,
            dilation_cycle: m.dilation_cycle,
            diffusion_steps: m.diffusion_steps,
            beta_1: m.beta_1,
            beta_n: m.beta_n,
            entity_embedding: m.entity_embedding,
            scaling: m.scaling,
            lags: None,
            train: TrainConfig::default(),
            samples: 100,
            quantiles: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            forecast_seed: 0,
            n_list: vec![2, 10, 100],
            repeats: 5,
            parallel: false,
            generate_kind: SyntheticKind::Var,
            generate_length: 2000,
            generate_freq: Frequency::Hour,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn unknown(key: &str, source: Source) -> Error {
    Error::Config(format!("unknown config key {key} ({})", source.describe()))
}

/// Parses the flat `section.key = value` format. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `section.key = value`", i + 1)))?;
        let key = key.trim();
        if !is_key(key) {
            return Err(Error::Config(format!(
                "config line {}: unknown config key {key}",
                i + 1
            )));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// `TIMEGRAD_TRAIN_SEED` becomes `train.seed`. Variables whose section is
/// not a config section are left alone; a known section with an unknown
/// key is an error.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<(String, String)>> {
    let sections: Vec<&str> = KEYS.iter().map(|(k, _)| k.split('.').next().unwrap()).collect();
    let mut out = Vec::new();
    for (name, value) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let lower = rest.to_ascii_lowercase();
        let Some(section) = sections.iter().find(|s| lower.starts_with(&format!("{s}_"))) else {
            continue;
        };
        let key = format!("{section}.{}", &lower[section.len() + 1..]);
        if !is_key(&key) {
            return Err(Error::Config(format!(
                "unknown config key {key} (environment variable {name})"
            )));
        }
        out.push((key, value));
    }
    out.sort();
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str, source: Source) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key} ({})", source.describe())))
}

fn parse_list<T: FromStr>(key: &str, value: &str, source: Source) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s, source))
        .collect()
}

fn parse_bool(key: &str, value: &str, source: Source) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key} ({}): expected true or false",
            source.describe()
        ))),
    }
}

impl RunConfig {
    /// Builds the effective configuration from the three layers, later
    /// layers winning key by key.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut layered: BTreeMap<String, (String, Source)> = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            for (k, v) in parse_config_text(&text)? {
                layered.insert(k, (v, Source::File));
            }
        }
        for (k, v) in env_overrides(env)? {
            layered.insert(k, (v, Source::Env));
        }
        for (k, v) in flags {
            if !is_key(k) {
                return Err(unknown(k, Source::Flag));
            }
            layered.insert(k.clone(), (v.clone(), Source::Flag));
        }
        let mut cfg = RunConfig::default();
        for (k, (v, src)) in &layered {
            cfg.apply(k, v, *src)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str, s: Source) -> Result<()> {
        match key {
            "data.path" => self.data_path = Some(PathBuf::from(v)),
            "data.format" => self.data_format = parse(key, v, s)?,
            "data.test_windows" => self.test_windows = parse(key, v, s)?,
            "model.prediction_steps" => self.prediction_steps = parse(key, v, s)?,
            "model.cell" => self.cell = parse(key, v, s)?,
            "model.layers" => self.layers = parse(key, v, s)?,
            "model.hidden" => self.hidden = parse(key, v, s)?,
            "model.residual_layers" => self.residual_layers = parse(key, v, s)?,
            "model.residual_channels" => self.residual_channels = parse(key, v, s)?,
            "model.dilation_cycle" => self.dilation_cycle = parse(key, v, s)?,
            "model.diffusion_steps" => self.diffusion_steps = parse(key, v, s)?,
            "model.beta_1" => self.beta_1 = parse(key, v, s)?,
            "model.beta_n" => self.beta_n = parse(key, v, s)?,
            "model.entity_embedding" => self.entity_embedding = parse(key, v, s)?,
            "model.scaling" => self.scaling = parse_bool(key, v, s)?,
            "covariates.lags" => self.lags = Some(parse_list(key, v, s)?),
            "train.learning_rate" => self.train.learning_rate = parse(key, v, s)?,
            "train.batch_size" => self.train.batch_size = parse(key, v, s)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v, s)?,
            "train.batches_per_epoch" => self.train.batches_per_epoch = parse(key, v, s)?,
            "train.patience" => self.train.patience = parse(key, v, s)?,
            "train.seed" => self.train.seed = parse(key, v, s)?,
            "train.validation_repeats" => self.train.validation_repeats = parse(key, v, s)?,
            "forecast.samples" => self.samples = parse(key, v, s)?,
            "forecast.quantiles" => self.quantiles = parse_list(key, v, s)?,
            "forecast.seed" => self.forecast_seed = parse(key, v, s)?,
            "ablation.n_list" => self.n_list = parse_list(key, v, s)?,
            "ablation.repeats" => self.repeats = parse(key, v, s)?,
            "ablation.parallel" => self.parallel = parse_bool(key, v, s)?,
            "generate.kind" => self.generate_kind = parse(key, v, s)?,
            "generate.length" => self.generate_length = parse(key, v, s)?,
            "generate.freq" => self.generate_freq = parse(key, v, s)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(unknown(other, s)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("forecast.samples must be at least 1".into()));
        }
        if self.quantiles.is_empty() {
            return Err(Error::Config("forecast.quantiles must not be empty".into()));
        }
        if let Some(q) = self.quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(Error::Config(format!(
                "forecast.quantiles: level {q} is outside (0, 1)"
            )));
        }
        if self.quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("forecast.quantiles must be strictly increasing".into()));
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::Config("ablation.n_list must hold positive integers".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("ablation.repeats must be at least 1".into()));
        }
        self.train.validate()
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data_path
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (set data.path or pass --data)".into()))
    }

    /// Model configuration for a dataset of `dim` entities at `freq`.
    pub fn model_config(&self, dim: usize, freq: Frequency) -> ModelConfig {
        ModelConfig {
            lags: self.lags.clone().unwrap_or_else(|| default_lags(freq)),
            scaling: self.scaling,
            cell: self.cell,
            layers: self.layers,
            hidden: self.hidden,
            residual_channels: self.residual_channels,
            residual_layers: self.residual_layers,
            dilation_cycle: self.dilation_cycle,
            entity_embedding: self.entity_embedding,
            diffusion_steps: self.diffusion_steps,
            beta_1: self.beta_1,
            beta_n: self.beta_n,
            ..ModelConfig::new(dim, freq, self.prediction_steps)
        }
    }
}
