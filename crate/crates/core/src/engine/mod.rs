//! Model assembly, training with early stopping, autoregressive
//! forecasting and checkpoints.

mod checkpoint;
mod export;
mod forecast;

use log::{debug, info};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use export::{
    plot_data, read_samples_csv, write_quantiles_csv, write_samples_csv, PlotBand, PlotData, PlotEntity, PlotWindow,
    CSV_SCHEMA_VERSION,
};
pub use forecast::{forecast, forecast_at, quantiles, rolling_forecast, ForecastSampleSet, QuantileTable};

use crate::denoiser::{Denoiser, DenoiserConfig, NoiseEmbeddingTable};
use crate::diffusion::{training_loss, DiffusionSchedule, NoiseLevel};
use crate::encoder::{CellKind, Encoder, EncoderConfig, EncoderState, GraphState};
use crate::error::{Error, Result};
use crate::numcore::{AdamConfig, Graph, ParameterSet, RngStream, Tensor, Var};
use crate::pipeline::{
    covariate_width, default_lags, sample_window, split, validate_lags, window_at, Dataset, Frequency, WindowSample,
};

const ENTITY_EMBEDDING: &str = "embedding.entity";

/// Architecture, covariates and diffusion schedule of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub freq: Frequency,
    /// Prediction length; the context window has the same length.
    pub prediction_steps: usize,
    pub lags: Vec<usize>,
    pub scaling: bool,
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub residual_channels: usize,
    pub residual_layers: usize,
    pub dilation_cycle: usize,
    pub noise_embedding: NoiseEmbeddingTable,
    /// Learned per-entity embedding width; 0 disables it.
    pub entity_embedding: usize,
    pub diffusion_steps: usize,
    pub beta_1: f64,
    pub beta_n: f64,
}

impl ModelConfig {
    pub fn new(dim: usize, freq: Frequency, prediction_steps: usize) -> Self {
        ModelConfig {
            dim,
            freq,
            prediction_steps,
            lags: default_lags(freq),
            scaling: true,
            cell: CellKind::Lstm,
            layers: 2,
            hidden: 40,
            residual_channels: 8,
            residual_layers: 8,
            dilation_cycle: 2,
            noise_embedding: NoiseEmbeddingTable::default(),
            entity_embedding: 0,
            diffusion_steps: 100,
            beta_1: 1e-4,
            beta_n: 0.1,
        }
    }

    pub fn covariate_width(&self) -> usize {
        covariate_width(self.freq, &self.lags, self.dim)
    }

    pub fn input_size(&self) -> usize {
        self.covariate_width() + self.dim * self.entity_embedding
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            cell: self.cell,
            layers: self.layers,
            hidden: self.hidden,
            input_size: self.input_size(),
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.dim,
            cond_dim: self.hidden,
            residual_channels: self.residual_channels,
            residual_layers: self.residual_layers,
            dilation_cycle: self.dilation_cycle,
            embedding: self.noise_embedding,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_1, self.beta_n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.prediction_steps == 0 {
            return Err(Error::Config("dimension and prediction steps must be positive".into()));
        }
        validate_lags(&self.lags)?;
        if self.diffusion_steps > self.noise_embedding.max_index {
            return Err(Error::Config(format!(
                "{} diffusion steps exceed the noise embedding table size {}",
                self.diffusion_steps, self.noise_embedding.max_index
            )));
        }
        self.schedule()?;
        Ok(())
    }
}

/// Encoder, noise-prediction network, schedule and their parameters.
#[derive(Debug, Clone)]
pub struct TimeGrad {
    cfg: ModelConfig,
    params: ParameterSet,
    encoder: Encoder,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
}

impl TimeGrad {
    /// Fresh model with parameters drawn from `rng`.
    pub fn new(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParameterSet::new();
        let encoder = Encoder::init(cfg.encoder_config(), &mut params, rng)?;
        let denoiser = Denoiser::init(cfg.denoiser_config(), &mut params, rng)?;
        if cfg.entity_embedding > 0 {
            params.insert_uniform(ENTITY_EMBEDDING, &[cfg.dim, cfg.entity_embedding], 1.0, rng)?;
        }
        let schedule = cfg.schedule()?;
        Ok(TimeGrad {
            cfg,
            params,
            encoder,
            denoiser,
            schedule,
        })
    }

    /// Model over existing parameters; names and shapes must match a
    /// fresh model of `cfg` exactly, in order.
    pub fn from_params(cfg: ModelConfig, params: ParameterSet) -> Result<Self> {
        let reference = TimeGrad::new(cfg.clone(), &mut RngStream::new(0))?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected.len() != found.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} parameters stored, configuration needs {}",
                found.len(),
                expected.len()
            )));
        }
        for ((en, es), (fnm, fs)) in expected.iter().zip(&found) {
            if en != fnm {
                return Err(Error::CheckpointFormat(format!("expected parameter {en}, found {fnm}")));
            }
            if es != fs {
                return Err(Error::CheckpointShape {
                    name: en.to_string(),
                    expected: es.to_vec(),
                    found: fs.to_vec(),
                });
            }
        }
        let TimeGrad {
            encoder,
            denoiser,
            schedule,
            ..
        } = reference;
        Ok(TimeGrad {
            cfg,
            params,
            encoder,
            denoiser,
            schedule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub(crate) fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.cfg.dim {
            return Err(Error::Contract(format!(
                "model has D = {} but the dataset has D = {}",
                self.cfg.dim,
                ds.dim()
            )));
        }
        if ds.freq() != self.cfg.freq {
            return Err(Error::Contract(format!(
                "model frequency {} differs from dataset frequency {}",
                self.cfg.freq,
                ds.freq()
            )));
        }
        Ok(())
    }

    /// Encoder input for a (batch, covariate_width) block of covariates,
    /// with the entity embedding appended when enabled.
    pub(crate) fn input_var(&self, g: &mut Graph, covariates: Tensor) -> Result<Var> {
        let rows = covariates.shape()[0];
        let c = g.constant(covariates);
        if self.cfg.entity_embedding == 0 {
            return Ok(c);
        }
        let e = g.param(&self.params, ENTITY_EMBEDDING)?;
        let width = self.cfg.dim * self.cfg.entity_embedding;
        let flat = g.reshape(e, &[1, width])?;
        let tiled = g.broadcast_to(flat, &[rows, width])?;
        g.concat(&[c, tiled], 1)
    }

    /// Encoder state after consuming `rows` of covariates, one at a time,
    /// from the zero state, for a batch of one.
    pub(crate) fn warm_state(&self, rows: &[Vec<f64>]) -> Result<EncoderState> {
        let mut state = EncoderState::zeros(self.encoder.config(), 1);
        for row in rows {
            let mut g = Graph::new();
            let x = self.input_var(&mut g, Tensor::new(vec![1, row.len()], row.clone())?)?;
            let prev = GraphState::constant(&mut g, &state);
            state = self.encoder.step(&mut g, &self.params, x, &prev)?.values(&g);
        }
        Ok(state)
    }

    /// Teacher-forced noise-matching loss over the prediction halves of
    /// `windows`, averaged over steps and windows. One noise level is
    /// drawn per (window, step).
    pub fn batch_loss(&self, g: &mut Graph, windows: &[WindowSample], rng: &mut RngStream) -> Result<Var> {
        let p = self.cfg.prediction_steps;
        let b = windows.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let width = self.cfg.covariate_width();
        let mut inputs = Vec::with_capacity(2 * p);
        for t in 0..2 * p {
            let mut data = Vec::with_capacity(b * width);
            for w in windows {
                data.extend_from_slice(&w.covariates.rows[t]);
            }
            inputs.push(self.input_var(g, Tensor::new(vec![b, width], data)?)?);
        }
        let zero = GraphState::constant(g, &EncoderState::zeros(self.encoder.config(), b));
        let states = self.encoder.unroll(g, &self.params, &inputs, &zero)?;
        let conds: Vec<Var> = states[p..].iter().map(GraphState::output).collect();
        let cond = g.concat(&conds, 0)?;
        let d = self.cfg.dim;
        let mut x0 = Vec::with_capacity(p * b * d);
        for t in p..2 * p {
            for w in windows {
                x0.extend_from_slice(&w.scaled[t]);
            }
        }
        let x0 = Tensor::new(vec![p * b, d], x0)?;
        let levels = (0..p * b)
            .map(|_| NoiseLevel::new(rng.int_inclusive(1, self.cfg.diffusion_steps), self.cfg.diffusion_steps))
            .collect::<Result<Vec<_>>>()?;
        let model = self.denoiser.bind(&self.params);
        training_loss(g, &x0, cond, &levels, rng, &model, &self.schedule)
    }
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Noise draws per validation window.
    pub validation_repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 20,
            batches_per_epoch: 50,
            patience: 5,
            seed: 0,
            validation_repeats: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.validation_repeats == 0 {
            return Err(Error::Config(
                "batch size, batches per epoch and validation repeats must be positive".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Best validation loss so far (including the untrained model).
    pub best: f64,
}

/// Training log as `epoch,train_loss,val_loss,best` CSV.
pub fn format_train_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,best\n");
    for e in log {
        out.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            e.epoch, e.train_loss, e.val_loss, e.best
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn tag_numeric(err: Error, context: impl FnOnce() -> String) -> Error {
    match err {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{}: {op}", context()),
        },
        other => other,
    }
}

/// Fixed validation windows: the `prediction_steps` rows right after the
/// training span, with the preceding rows as context, repeated.
fn validation_windows(ds: &Dataset, cfg: &ModelConfig, repeats: usize) -> Result<Vec<WindowSample>> {
    let spans = split(ds, cfg.prediction_steps)?;
    let offset = spans.validation.start - cfg.prediction_steps;
    let w = window_at(ds, offset, cfg.prediction_steps, &cfg.lags, cfg.scaling)?;
    Ok(vec![w; repeats])
}

/// Mean validation loss with noise drawn from a fixed stream.
pub fn validation_loss(model: &TimeGrad, windows: &[WindowSample], seed: u64) -> Result<f64> {
    let mut rng = RngStream::with_stream(seed, 3);
    let mut g = Graph::new();
    let loss = model.batch_loss(&mut g, windows, &mut rng)?;
    g.value(loss).item()
}

/// Trains on the training span of `ds` and returns the checkpoint with
/// the best validation loss seen (possibly the untrained model).
pub fn train(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if ds.dim() != model_cfg.dim {
        return Err(Error::Config(format!(
            "configuration has D = {} but the dataset has D = {}",
            model_cfg.dim,
            ds.dim()
        )));
    }
    let spans = split(ds, model_cfg.prediction_steps)?;
    let train_ds = ds.slice(spans.train.clone())?;
    if train_ds.len() < 2 * model_cfg.prediction_steps {
        return Err(Error::Config(format!(
            "training span of {} rows cannot hold a context and prediction window of {} each",
            train_ds.len(),
            model_cfg.prediction_steps
        )));
    }
    let mut model = TimeGrad::new(model_cfg.clone(), &mut RngStream::with_stream(cfg.seed, 0))?;
    let mut window_rng = RngStream::with_stream(cfg.seed, 1);
    let mut noise_rng = RngStream::with_stream(cfg.seed, 2);
    let val_windows = validation_windows(ds, model_cfg, cfg.validation_repeats)?;

    let initial = validation_loss(&model, &val_windows, cfg.seed)
        .map_err(|e| tag_numeric(e, || "validation before training".into()))?;
    let mut best = initial;
    let mut best_params = model.params.clone();
    let mut stale = 0;
    let mut log = Vec::new();
    info!("initial validation loss {initial:.5}");

    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let windows = (0..cfg.batch_size)
                .map(|_| {
                    sample_window(
                        &train_ds,
                        model_cfg.prediction_steps,
                        &model_cfg.lags,
                        model_cfg.scaling,
                        &mut window_rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let step = |g: &mut Graph, model: &mut TimeGrad, rng: &mut RngStream| -> Result<f64> {
                let loss = model.batch_loss(g, &windows, rng)?;
                let value = g.value(loss).item()?;
                g.backward(loss)?;
                model.params.zero_grads();
                model.params.accumulate_grads(g);
                model.params.adam_step(cfg.learning_rate, AdamConfig::default())?;
                Ok(value)
            };
            let value = step(&mut g, &mut model, &mut noise_rng)
                .map_err(|e| tag_numeric(e, || format!("epoch {epoch}, batch {batch}")))?;
            total += value;
            debug!("epoch {epoch} batch {batch} loss {value:.5}");
        }
        let train_loss = total / cfg.batches_per_epoch as f64;
        let val_loss = validation_loss(&model, &val_windows, cfg.seed)
            .map_err(|e| tag_numeric(e, || format!("validation after epoch {epoch}")))?;
        if val_loss < best {
            best = val_loss;
            best_params = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} best {best:.5}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            best,
        });
        if stale >= cfg.patience {
            info!("early stopping after epoch {epoch}");
            break;
        }
    }
    model.params = best_params;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            best_val_loss: best,
            seed: cfg.seed,
        },
        log,
    })
}
