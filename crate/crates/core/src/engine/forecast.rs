use chrono::NaiveDateTime;

use super::TimeGrad;
use crate::diffusion::sample;
use crate::encoder::GraphState;
use crate::error::{Error, Result};
use crate::metrics::SampleCube;
use crate::numcore::{Graph, RngStream, Tensor};
use crate::pipeline::{build_covariates, calendar_features, Dataset, Scaler};

/// Sampled trajectories in original units for one forecast window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSampleSet {
    /// Index of the rolling window this forecast belongs to.
    pub window: usize,
    /// Dataset row of the first forecast step.
    pub start: usize,
    pub timestamps: Vec<NaiveDateTime>,
    /// Per-entity divisors that were applied before unscaling.
    pub divisors: Vec<f64>,
    pub cube: SampleCube,
}

/// Forecast of the `prediction_steps` rows following the end of `ds`.
pub fn forecast(model: &TimeGrad, ds: &Dataset, samples: usize, rng: &RngStream) -> Result<ForecastSampleSet> {
    forecast_at(model, ds, ds.len(), samples, rng, 0)
}

/// Forecast of rows `end..end + prediction_steps` from the context
/// `end - prediction_steps..end`. Trajectory `j` draws only from
/// `rng.split(j)`.
pub fn forecast_at(
    model: &TimeGrad,
    ds: &Dataset,
    end: usize,
    samples: usize,
    rng: &RngStream,
    window: usize,
) -> Result<ForecastSampleSet> {
    model.check_dataset(ds)?;
    let cfg = model.config();
    let p = cfg.prediction_steps;
    let d = cfg.dim;
    if samples == 0 {
        return Err(Error::Contract("at least one sample trajectory is required".into()));
    }
    if end < p || end > ds.len() {
        return Err(Error::Contract(format!(
            "forecast start {end} needs {p} context rows inside a dataset of {} rows",
            ds.len()
        )));
    }
    let values = ds.values();
    let context = &values[end - p..end];
    let scaler = if cfg.scaling {
        Scaler::fit(context)?
    } else {
        Scaler::identity(d)
    };
    let max_lag = cfg.lags.iter().copied().max().unwrap_or(0);
    let pre_start = (end - p).saturating_sub(max_lag);
    let history = scaler.scale(&values[pre_start..end]);
    let ctx_cov = build_covariates(&ds.timestamps(end - p..end), cfg.freq, &cfg.lags, &history)?;
    let mut state = model.warm_state(&ctx_cov.rows)?.repeat_row(0, samples);

    let mut rngs: Vec<RngStream> = (0..samples as u64).map(|j| rng.split(j)).collect();
    let timestamps = ds.timestamps(end..end + p);
    let bound = model.denoiser().bind(model.params());
    let width = cfg.covariate_width();
    // scaled[j][k] = trajectory j at forecast step k
    let mut scaled: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(p); samples];
    for (k, ts) in timestamps.iter().enumerate() {
        let calendar = calendar_features(*ts, cfg.freq);
        let mut input = Vec::with_capacity(samples * width);
        for traj in &scaled {
            input.extend_from_slice(&calendar);
            for &lag in &cfg.lags {
                let idx = (end + k) as isize - lag as isize;
                if idx >= end as isize {
                    input.extend_from_slice(&traj[idx as usize - end]);
                } else if idx >= pre_start as isize {
                    input.extend_from_slice(&history[idx as usize - pre_start]);
                } else {
                    input.extend(std::iter::repeat_n(0.0, d));
                }
            }
        }
        let mut g = Graph::new();
        let x = model.input_var(&mut g, Tensor::new(vec![samples, width], input)?)?;
        let prev = GraphState::constant(&mut g, &state);
        state = model.encoder().step(&mut g, model.params(), x, &prev)?.values(&g);
        let x0 = sample(state.output(), &mut rngs, &bound, model.schedule()).map_err(|e| match e {
            Error::Numeric { op } => Error::Numeric {
                op: format!("forecast step {k}: {op}"),
            },
            other => other,
        })?;
        for (j, traj) in scaled.iter_mut().enumerate() {
            traj.push(x0.row(j).to_vec());
        }
    }
    let mut data = Vec::with_capacity(samples * p * d);
    for traj in &scaled {
        for row in traj {
            data.extend(scaler.unscale_row(row));
        }
    }
    Ok(ForecastSampleSet {
        window,
        start: end,
        timestamps,
        divisors: scaler.divisors().to_vec(),
        cube: SampleCube::new(samples, p, d, data)?,
    })
}

/// Forecasts `windows` consecutive non-overlapping windows covering the
/// last `windows * prediction_steps` rows of `ds`, each from the true
/// history before it. Window `w` uses `rng.split(w)`.
pub fn rolling_forecast(
    model: &TimeGrad,
    ds: &Dataset,
    windows: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<Vec<(ForecastSampleSet, Vec<Vec<f64>>)>> {
    let p = model.config().prediction_steps;
    let span = windows * p;
    if windows == 0 || span + p > ds.len() {
        return Err(Error::Contract(format!(
            "{windows} rolling windows of {p} steps do not fit in {} rows",
            ds.len()
        )));
    }
    let test_start = ds.len() - span;
    (0..windows)
        .map(|w| {
            let end = test_start + w * p;
            let fs = forecast_at(model, ds, end, samples, &rng.split(w as u64), w)?;
            Ok((fs, ds.values()[end..end + p].to_vec()))
        })
        .collect()
}

/// Empirical quantiles per (step, entity, level).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTable {
    pub levels: Vec<f64>,
    pub steps: usize,
    pub dim: usize,
    values: Vec<f64>,
}

impl QuantileTable {
    pub fn get(&self, t: usize, d: usize, level: usize) -> f64 {
        self.values[(t * self.dim + d) * self.levels.len() + level]
    }
}

/// Linear interpolation between order statistics at position `(S-1) q`.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(fs: &ForecastSampleSet, levels: &[f64]) -> Result<QuantileTable> {
    if let Some(bad) = levels.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::Contract(format!("quantile level {bad} is outside (0, 1)")));
    }
    let cube = &fs.cube;
    let mut values = Vec::with_capacity(cube.steps() * cube.dim() * levels.len());
    for t in 0..cube.steps() {
        for d in 0..cube.dim() {
            let mut cell = cube.cell(t, d);
            cell.sort_by(f64::total_cmp);
            values.extend(levels.iter().map(|&q| quantile_sorted(&cell, q)));
        }
    }
    Ok(QuantileTable {
        levels: levels.to_vec(),
        steps: cube.steps(),
        dim: cube.dim(),
        values,
    })
}
