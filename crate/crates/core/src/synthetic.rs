//! Synthetic series with known generating processes.

use crate::error::{Error, Result};
use crate::metrics::SampleCube;
use crate::numcore::RngStream;
use crate::pipeline::{Dataset, Frequency};

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        if m[i].len() != n {
            return Err(Error::dimension("cholesky", &[n, n], &[n, m[i].len()]));
        }
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if d <= 0.0 {
                    return Err(Error::Contract("covariance is not positive definite".into()));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// `x_t = mu + A (x_{t-1} - mu) + L e_t` with `e_t ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarProcess {
    pub coefficients: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    chol: Vec<Vec<f64>>,
}

impl VarProcess {
    pub fn new(coefficients: Vec<Vec<f64>>, mean: Vec<f64>, noise_cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if coefficients.len() != d || coefficients.iter().any(|r| r.len() != d) || noise_cov.len() != d {
            return Err(Error::dimension("VAR(1) parameters", &[d, d], &[coefficients.len()]));
        }
        Ok(VarProcess {
            coefficients,
            mean,
            chol: cholesky(noise_cov)?,
        })
    }

    /// Two entities, coefficient eigenvalues 0.9 and 0.3, unit noise
    /// variances with correlation 0.8, means 10 and 20.
    pub fn correlated_pair() -> Self {
        VarProcess::new(
            vec![vec![0.6, 0.3], vec![0.3, 0.6]],
            vec![10.0, 20.0],
            &[vec![1.0, 0.8], vec![0.8, 1.0]],
        )
        .expect("valid fixture")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn step(&self, prev: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let d = self.dim();
        let e: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        (0..d)
            .map(|i| {
                let ar: f64 = (0..d).map(|j| self.coefficients[i][j] * (prev[j] - self.mean[j])).sum();
                let noise: f64 = (0..=i).map(|j| self.chol[i][j] * e[j]).sum();
                self.mean[i] + ar + noise
            })
            .collect()
    }

    /// `len` rows after discarding `burn_in` steps started at the mean.
    pub fn generate(&self, len: usize, burn_in: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        let mut x = self.mean.clone();
        for _ in 0..burn_in {
            x = self.step(&x, rng);
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            x = self.step(&x, rng);
            out.push(x.clone());
        }
        out
    }

    /// Sample paths of the true process continuing from `last`;
    /// path `j` uses `rng.split(j)`.
    pub fn oracle_forecast(&self, last: &[f64], steps: usize, samples: usize, rng: &RngStream) -> Result<SampleCube> {
        let mut data = Vec::with_capacity(samples * steps * self.dim());
        for j in 0..samples {
            let mut r = rng.split(j as u64);
            let mut x = last.to_vec();
            for _ in 0..steps {
                x = self.step(&x, &mut r);
                data.extend_from_slice(&x);
            }
        }
        SampleCube::new(samples, steps, self.dim(), data)
    }
}

/// Scalar `x_t = phi x_{t-1} + sigma e_t` started at 0.
pub fn ar1(phi: f64, sigma: f64, len: usize, burn_in: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut x = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..burn_in + len {
        x = phi * x + sigma * rng.normal();
        if i >= burn_in {
            out.push(vec![x]);
        }
    }
    out
}

/// i.i.d. scalar `N(mean, std^2)` draws.
pub fn iid_normal(mean: f64, std: f64, len: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..len).map(|_| vec![mean + std * rng.normal()]).collect()
}

/// Correlated geometric random walks resembling daily exchange rates.
pub fn exchange_like(dim: usize, len: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let vol = 0.006;
    let rho: f64 = 0.5;
    let mut x: Vec<f64> = (0..dim).map(|i| 0.5 + 1.5 * i as f64 / dim.max(1) as f64).collect();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let common = rng.normal();
        for v in x.iter_mut() {
            let shock = rho.sqrt() * common + (1.0 - rho).sqrt() * rng.normal();
            *v *= (vol * shock).exp();
        }
        out.push(x.clone());
    }
    out
}

pub fn to_dataset(freq: Frequency, values: Vec<Vec<f64>>) -> Result<Dataset> {
    Dataset::from_values(freq, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let m = vec![vec![4.0, 1.2], vec![1.2, 1.0]];
        let l = cholesky(&m).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - m[i][j]).abs() < 1e-14);
            }
        }
        assert!(cholesky(&[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn var_noise_correlation_and_mean() {
        let p = VarProcess::correlated_pair();
        let mut rng = RngStream::new(1);
        let xs = p.generate(20_000, 100, &mut rng);
        let mean0 = xs.iter().map(|r| r[0]).sum::<f64>() / xs.len() as f64;
        assert!((mean0 - 10.0).abs() < 0.3, "{mean0}");
        // one-step innovations
        let innov: Vec<(f64, f64)> = xs
            .windows(2)
            .map(|w| {
                let a = &p.coefficients;
                let e0 = w[1][0] - 10.0 - a[0][0] * (w[0][0] - 10.0) - a[0][1] * (w[0][1] - 20.0);
                let e1 = w[1][1] - 20.0 - a[1][0] * (w[0][0] - 10.0) - a[1][1] * (w[0][1] - 20.0);
                (e0, e1)
            })
            .collect();
        let n = innov.len() as f64;
        let c = innov.iter().map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((c - 0.8).abs() < 0.03, "{c}");
    }

    #[test]
    fn oracle_paths_are_reproducible() {
        let p = VarProcess::correlated_pair();
        let rng = RngStream::new(2);
        let a = p.oracle_forecast(&[10.0, 20.0], 5, 4, &rng).unwrap();
        let b = p.oracle_forecast(&[10.0, 20.0], 5, 2, &rng).unwrap();
        assert_eq!(a.trajectory(1), b.trajectory(1));
    }

    #[test]
    fn exchange_like_stays_positive() {
        let xs = exchange_like(8, 500, &mut RngStream::new(3));
        assert!(xs.iter().flatten().all(|v| *v > 0.0));
    }
}
