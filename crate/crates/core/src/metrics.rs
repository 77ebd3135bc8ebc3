//! CRPS for empirical predictive distributions and its summed-series
//! variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `samples x steps x dim` array of sampled trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCube {
    samples: usize,
    steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl SampleCube {
    pub fn new(samples: usize, steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if samples == 0 || steps == 0 || dim == 0 {
            return Err(Error::Contract("sample cube dimensions must be positive".into()));
        }
        if data.len() != samples * steps * dim {
            return Err(Error::dimension("sample cube", &[samples, steps, dim], &[data.len()]));
        }
        Ok(SampleCube {
            samples,
            steps,
            dim,
            data,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, s: usize, t: usize, d: usize) -> f64 {
        self.data[(s * self.steps + t) * self.dim + d]
    }

    /// Trajectory `s` as `steps x dim`, row-major.
    pub fn trajectory(&self, s: usize) -> &[f64] {
        let n = self.steps * self.dim;
        &self.data[s * n..(s + 1) * n]
    }

    /// All sampled values of one (step, entity) cell.
    pub fn cell(&self, t: usize, d: usize) -> Vec<f64> {
        (0..self.samples).map(|s| self.get(s, t, d)).collect()
    }

    /// Per-sample sums over entities at step `t`.
    pub fn summed(&self, t: usize) -> Vec<f64> {
        (0..self.samples)
            .map(|s| (0..self.dim).map(|d| self.get(s, t, d)).sum())
            .collect()
    }
}

/// Exact CRPS of the empirical distribution of `samples` at `x`:
/// `mean|X - x| - 1/(2 S^2) sum |X_s - X_t|`, evaluated after sorting.
pub fn crps_empirical(samples: &[f64], x: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("CRPS needs at least one sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(crps_sorted(&sorted, x))
}

fn crps_sorted(sorted: &[f64], x: f64) -> f64 {
    let s = sorted.len() as f64;
    let abs_err: f64 = sorted.iter().map(|v| (v - x).abs()).sum::<f64>() / s;
    // sum_{s,t} |X_s - X_t| = 2 sum_i (2i - S + 1) X_(i)
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - s + 1.0) * v)
        .sum::<f64>()
        / (s * s);
    (abs_err - spread).max(0.0)
}

fn check_truth(cube: &SampleCube, truth: &[Vec<f64>]) -> Result<()> {
    if truth.len() != cube.steps || truth.iter().any(|r| r.len() != cube.dim) {
        let got = [truth.len(), truth.first().map_or(0, Vec::len)];
        return Err(Error::dimension(
            "horizon alignment (samples vs truth)",
            &[cube.steps, cube.dim],
            &got,
        ));
    }
    Ok(())
}

/// CRPS of the across-entity sum, averaged over the horizon.
pub fn crps_sum(cube: &SampleCube, truth: &[Vec<f64>]) -> Result<f64> {
    check_truth(cube, truth)?;
    let mut total = 0.0;
    for (t, row) in truth.iter().enumerate() {
        total += crps_empirical(&cube.summed(t), row.iter().sum())?;
    }
    Ok(total / cube.steps as f64)
}

/// Mean CRPS over the horizon for each entity.
pub fn crps_per_entity(cube: &SampleCube, truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_truth(cube, truth)?;
    (0..cube.dim)
        .map(|d| {
            let mut total = 0.0;
            for (t, row) in truth.iter().enumerate() {
                total += crps_empirical(&cube.cell(t, d), row[d])?;
            }
            Ok(total / cube.steps as f64)
        })
        .collect()
}

/// Metrics JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrpsReport {
    pub crps_sum: f64,
    pub crps_per_entity: Vec<f64>,
    #[serde(rename = "S")]
    pub samples: usize,
    pub windows: usize,
}

impl CrpsReport {
    /// Scores every `(samples, truth)` window and averages uniformly.
    pub fn evaluate(windows: &[(SampleCube, Vec<Vec<f64>>)]) -> Result<Self> {
        let Some((first, _)) = windows.first() else {
            return Err(Error::Contract("no forecast windows to evaluate".into()));
        };
        let dim = first.dim();
        let mut sum = 0.0;
        let mut per = vec![0.0; dim];
        for (cube, truth) in windows {
            if cube.dim() != dim || cube.samples() != first.samples() {
                return Err(Error::dimension(
                    "evaluation windows",
                    &[first.samples(), dim],
                    &[cube.samples(), cube.dim()],
                ));
            }
            sum += crps_sum(cube, truth)?;
            for (p, v) in per.iter_mut().zip(crps_per_entity(cube, truth)?) {
                *p += v;
            }
        }
        let w = windows.len() as f64;
        Ok(CrpsReport {
            crps_sum: sum / w,
            crps_per_entity: per.into_iter().map(|p| p / w).collect(),
            samples: first.samples(),
            windows: windows.len(),
        })
    }
}

/// Repeats the last context row over the horizon, `samples` times.
pub fn persistence_baseline(context: &[Vec<f64>], steps: usize, samples: usize) -> Result<SampleCube> {
    let last = context
        .last()
        .ok_or_else(|| Error::Contract("persistence needs a non-empty context".into()))?;
    let dim = last.len();
    let data = (0..samples * steps).flat_map(|_| last.iter().copied()).collect();
    SampleCube::new(samples, steps, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_point_forecast_scores_zero() {
        assert_eq!(crps_empirical(&[2.5; 7], 2.5).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_is_absolute_error() {
        assert_eq!(crps_empirical(&[1.25], -0.5).unwrap(), 1.75);
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(matches!(crps_empirical(&[], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn crps_sum_with_one_entity_is_mean_crps() {
        let data = vec![0.0, 1.0, 2.0, 1.0, 3.0, 0.5];
        let cube = SampleCube::new(3, 2, 1, data).unwrap();
        let truth = vec![vec![0.7], vec![1.9]];
        let expect =
            (crps_empirical(&[0.0, 2.0, 3.0], 0.7).unwrap() + crps_empirical(&[1.0, 1.0, 0.5], 1.9).unwrap()) / 2.0;
        assert_eq!(crps_sum(&cube, &truth).unwrap(), expect);
    }

    #[test]
    fn misaligned_horizon_is_a_dimension_error() {
        let cube = SampleCube::new(2, 3, 1, vec![0.0; 6]).unwrap();
        let err = crps_sum(&cube, &[vec![0.0], vec![0.0]]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn persistence_repeats_last_value() {
        let ctx = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let cube = persistence_baseline(&ctx, 4, 5).unwrap();
        for s in 0..5 {
            for t in 0..4 {
                assert_eq!(cube.get(s, t, 0), 3.0);
                assert_eq!(cube.get(s, t, 1), 4.0);
            }
        }
        let flat = vec![vec![2.0, 2.0]; 4];
        assert_eq!(crps_sum(&cube, &vec![vec![3.0, 4.0]; 4]).unwrap(), 0.0);
        let constant = persistence_baseline(&flat, 4, 1).unwrap();
        assert_eq!(crps_sum(&constant, &flat).unwrap(), 0.0);
    }

    #[test]
    fn persistence_on_trend_is_penalised() {
        let series: Vec<Vec<f64>> = (0..20).map(|t| vec![t as f64, 0.5 * t as f64]).collect();
        let cube = persistence_baseline(&series[..10], 10, 3).unwrap();
        // sums grow by 1.5 per step: errors 1.5, 3.0, ... 15.0
        let expect = (1..=10).map(|k| 1.5 * k as f64).sum::<f64>() / 10.0;
        let got = crps_sum(&cube, &series[10..]).unwrap();
        assert!(got > 0.0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_with_documented_keys() {
        let cube = SampleCube::new(2, 1, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let report = CrpsReport::evaluate(&[(cube, vec![vec![1.0, 2.0]])]).unwrap();
        let json: serde_json::Value = serde_json::to_value(&report).unwrap();
        assert_eq!(json["crps_sum"], 0.0);
        assert_eq!(json["S"], 2);
        assert_eq!(json["windows"], 1);
        assert_eq!(json["crps_per_entity"].as_array().unwrap().len(), 2);
    }
}
