//! Python module `timegrad`: datasets, training, sampling, CRPS and the
//! noise schedule.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use timegrad::diffusion;
use timegrad::encoder::CellKind;
use timegrad::engine::{self, Checkpoint, ModelConfig, TrainConfig};
use timegrad::metrics::{self, SampleCube};
use timegrad::numcore::RngStream;
use timegrad::pipeline::{self, DatasetFormat, Frequency};
use timegrad::{Error, ErrorClass};

create_exception!(timegrad, TimeGradError, PyException);
create_exception!(timegrad, ConfigError, TimeGradError);
create_exception!(timegrad, DataError, TimeGradError);
create_exception!(timegrad, NumericError, TimeGradError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::Data => DataError::new_err(msg),
        ErrorClass::Numeric => NumericError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for timegrad::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().py_err()
}

/// Linear noise schedule.
#[pyclass(name = "DiffusionSchedule", frozen)]
struct PySchedule {
    inner: diffusion::DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 100, beta_1 = 1e-4, beta_n = 0.1))]
    fn new(steps: usize, beta_1: f64, beta_n: f64) -> PyResult<Self> {
        Ok(PySchedule {
            inner: diffusion::DiffusionSchedule::linear(steps, beta_1, beta_n).py_err()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    #[getter]
    fn tilde_betas(&self) -> Vec<f64> {
        self.inner.tilde_betas().to_vec()
    }

    /// Rows `(n, beta, alpha_bar, tilde_beta)` for n = 1..N.
    fn table(&self) -> Vec<(usize, f64, f64, f64)> {
        let s = &self.inner;
        (0..s.len())
            .map(|i| (i + 1, s.betas()[i], s.alpha_bars()[i], s.tilde_betas()[i]))
            .collect()
    }
}

/// Regularly spaced multivariate series.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: pipeline::Dataset,
}

#[pymethods]
impl PyDataset {
    /// `values` is a list of rows, one value per entity.
    #[staticmethod]
    #[pyo3(signature = (values, freq = "H"))]
    fn from_values(values: Vec<Vec<f64>>, freq: &str) -> PyResult<Self> {
        let freq: Frequency = parse(freq)?;
        Ok(PyDataset {
            inner: pipeline::Dataset::from_values(freq, values).py_err()?,
        })
    }

    /// Loads a `csv_wide` or `jsonlines` file.
    #[staticmethod]
    #[pyo3(signature = (path, format = "csv_wide"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let format: DatasetFormat = parse(format)?;
        Ok(PyDataset {
            inner: pipeline::load_dataset(&path, format).py_err()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn freq(&self) -> &'static str {
        self.inner.freq().as_str()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values().to_vec()
    }

    /// Rows `start..stop`.
    fn slice(&self, start: usize, stop: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.slice(start..stop).py_err()?,
        })
    }
}

/// A trained model together with its training log.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    checkpoint: Checkpoint,
    log: Vec<engine::EpochLog>,
}

fn cube_to_nested(cube: &SampleCube) -> Vec<Vec<Vec<f64>>> {
    (0..cube.samples())
        .map(|s| cube.trajectory(s).chunks(cube.dim()).map(<[f64]>::to_vec).collect())
        .collect()
}

fn nested_to_cube(samples: Vec<Vec<Vec<f64>>>) -> PyResult<SampleCube> {
    let s = samples.len();
    let t = samples.first().map_or(0, Vec::len);
    let d = samples.first().and_then(|x| x.first()).map_or(0, Vec::len);
    if samples
        .iter()
        .any(|tr| tr.len() != t || tr.iter().any(|r| r.len() != d))
    {
        return Err(DataError::new_err(
            "samples must be a rectangular [S][T][D] nested list",
        ));
    }
    SampleCube::new(s, t, d, samples.into_iter().flatten().flatten().collect()).py_err()
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            checkpoint: engine::load_checkpoint(&path).py_err()?,
            log: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        engine::save_checkpoint(&self.checkpoint, &path).py_err()
    }

    #[getter]
    fn best_val_loss(&self) -> f64 {
        self.checkpoint.best_val_loss
    }

    #[getter]
    fn prediction_steps(&self) -> usize {
        self.checkpoint.model.config().prediction_steps
    }

    /// Rows `(epoch, train_loss, val_loss, best)`; empty for loaded models.
    #[getter]
    fn train_log(&self) -> Vec<(usize, f64, f64, f64)> {
        self.log
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.val_loss, e.best))
            .collect()
    }

    /// Samples `[S][T][D]` for the steps following the end of `dataset`.
    #[pyo3(signature = (dataset, samples = 100, seed = 0))]
    fn forecast(&self, py: Python<'_>, dataset: &PyDataset, samples: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let model = &self.checkpoint.model;
        let fs = py
            .detach(|| engine::forecast(model, &dataset.inner, samples, &RngStream::new(seed)))
            .py_err()?;
        Ok(cube_to_nested(&fs.cube))
    }
}

/// Trains a model on `dataset`; the last window is used for validation.
#[pyfunction]
#[pyo3(signature = (
    dataset,
    prediction_steps,
    *,
    seed = 0,
    max_epochs = 20,
    batches_per_epoch = 50,
    batch_size = 64,
    learning_rate = 1e-3,
    patience = 5,
    hidden = 40,
    layers = 2,
    cell = "lstm",
    residual_layers = 8,
    residual_channels = 8,
    diffusion_steps = 100,
    beta_1 = 1e-4,
    beta_n = 0.1,
    lags = None,
    scaling = true,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    prediction_steps: usize,
    seed: u64,
    max_epochs: usize,
    batches_per_epoch: usize,
    batch_size: usize,
    learning_rate: f64,
    patience: usize,
    hidden: usize,
    layers: usize,
    cell: &str,
    residual_layers: usize,
    residual_channels: usize,
    diffusion_steps: usize,
    beta_1: f64,
    beta_n: f64,
    lags: Option<Vec<usize>>,
    scaling: bool,
) -> PyResult<PyModel> {
    let ds = &dataset.inner;
    let cell: CellKind = parse(cell)?;
    let base = ModelConfig::new(ds.dim(), ds.freq(), prediction_steps);
    let mcfg = ModelConfig {
        lags: lags.unwrap_or(base.lags.clone()),
        scaling,
        cell,
        layers,
        hidden,
        residual_layers,
        residual_channels,
        diffusion_steps,
        beta_1,
        beta_n,
        ..base
    };
    let tcfg = TrainConfig {
        learning_rate,
        batch_size,
        max_epochs,
        batches_per_epoch,
        patience,
        seed,
        ..TrainConfig::default()
    };
    let out = py.detach(|| engine::train(ds, &mcfg, &tcfg)).py_err()?;
    Ok(PyModel {
        checkpoint: out.checkpoint,
        log: out.log,
    })
}

/// CRPS of the empirical distribution of `samples` at `x`.
#[pyfunction]
fn crps(samples: Vec<f64>, x: f64) -> PyResult<f64> {
    metrics::crps_empirical(&samples, x).py_err()
}

/// CRPS of the across-entity sum for samples `[S][T][D]` and truth `[T][D]`.
#[pyfunction]
fn crps_sum(samples: Vec<Vec<Vec<f64>>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::crps_sum(&nested_to_cube(samples)?, &truth).py_err()
}

/// Type-7 empirical quantile of `samples` at `level`.
#[pyfunction]
fn quantile(samples: Vec<f64>, level: f64) -> PyResult<f64> {
    if samples.is_empty() {
        return Err(DataError::new_err("quantile of an empty sample"));
    }
    let cube = SampleCube::new(samples.len(), 1, 1, samples).py_err()?;
    let fs = engine::ForecastSampleSet {
        window: 0,
        start: 0,
        timestamps: Vec::new(),
        divisors: vec![1.0],
        cube,
    };
    Ok(engine::quantiles(&fs, &[level]).py_err()?.get(0, 0, 0))
}

#[pymodule]
#[pyo3(name = "timegrad")]
fn timegrad_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("TimeGradError", py.get_type::<TimeGradError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add("CHECKPOINT_VERSION", engine::CHECKPOINT_VERSION)?;
    m.add("CSV_SCHEMA_VERSION", engine::CSV_SCHEMA_VERSION)?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(crps, m)?)?;
    m.add_function(wrap_pyfunction!(crps_sum, m)?)?;
    m.add_function(wrap_pyfunction!(quantile, m)?)?;
    Ok(())
}
