//! Variance schedules and the forward/reverse diffusion processes.
//!
//! Noise levels are 1-indexed, `n = 1..=N`, with the convention
//! `alpha_bar(0) = 1`. The reverse variance is fixed to the forward
//! posterior variance `tilde_beta(n)`, which is exactly zero at `n = 1`.

use crate::error::{Error, Result};
use crate::numcore::{Graph, RngStream, Tensor, Var};

/// Noise index `n` in `1..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NoiseLevel(usize);

impl NoiseLevel {
    pub fn new(n: usize, max: usize) -> Result<Self> {
        if n == 0 || n > max {
            return Err(Error::Contract(format!("noise level {n} outside 1..={max}")));
        }
        Ok(NoiseLevel(n))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    tilde_betas: Vec<f64>,
}

impl DiffusionSchedule {
    /// `n_steps` betas equally spaced from `beta_1` to `beta_n` inclusive.
    pub fn linear(n_steps: usize, beta_1: f64, beta_n: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("diffusion length N must be >= 1".into()));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_n && beta_n < 1.0) {
            return Err(Error::Config(format!(
                "linear schedule needs 0 < beta_1 <= beta_N < 1, got beta_1={beta_1}, beta_N={beta_n}"
            )));
        }
        let betas = if n_steps == 1 {
            vec![beta_1]
        } else {
            let step = (beta_n - beta_1) / (n_steps - 1) as f64;
            (0..n_steps)
                .map(|i| {
                    if i + 1 == n_steps {
                        beta_n
                    } else {
                        beta_1 + step * i as f64
                    }
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Schedule from an explicit beta sequence (each in (0, 1)).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let tilde_betas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
            tilde_betas,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn level(&self, n: usize) -> Result<NoiseLevel> {
        NoiseLevel::new(n, self.len())
    }

    fn ix(&self, n: NoiseLevel) -> usize {
        assert!(
            n.0 >= 1 && n.0 <= self.len(),
            "noise level {} outside 1..={}",
            n.0,
            self.len()
        );
        n.0 - 1
    }

    pub fn beta(&self, n: NoiseLevel) -> f64 {
        self.betas[self.ix(n)]
    }

    pub fn alpha(&self, n: NoiseLevel) -> f64 {
        self.alphas[self.ix(n)]
    }

    pub fn alpha_bar(&self, n: NoiseLevel) -> f64 {
        self.alpha_bars[self.ix(n)]
    }

    /// `alpha_bar(n - 1)`, equal to 1 at `n = 1`.
    pub fn alpha_bar_prev(&self, n: NoiseLevel) -> f64 {
        let i = self.ix(n);
        if i == 0 {
            1.0
        } else {
            self.alpha_bars[i - 1]
        }
    }

    pub fn tilde_beta(&self, n: NoiseLevel) -> f64 {
        self.tilde_betas[self.ix(n)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn tilde_betas(&self) -> &[f64] {
        &self.tilde_betas
    }

    /// Coefficients `(c0, cn)` of the forward posterior mean
    /// `c0 * x0 + cn * xn`.
    pub fn posterior_coefficients(&self, n: NoiseLevel) -> (f64, f64) {
        let ab = self.alpha_bar(n);
        let ab_prev = self.alpha_bar_prev(n);
        let c0 = ab_prev.sqrt() * self.beta(n) / (1.0 - ab);
        let cn = self.alpha(n).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, cn)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape checked")
}

/// Closed-form sample of `q(x^n | x^0)`: `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn forward_marginal(x0: &Tensor, n: NoiseLevel, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    same_shape("forward_marginal", x0, eps)?;
    let ab = sched.alpha_bar(n);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(zip_map(x0, eps, |x, e| a * x + b * e))
}

/// One forward transition `q(x^n | x^{n-1}) = N(sqrt(1 - beta) x, beta I)`.
pub fn forward_step(x_prev: &Tensor, n: NoiseLevel, rng: &mut RngStream, sched: &DiffusionSchedule) -> Tensor {
    let beta = sched.beta(n);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    let data = x_prev.data().iter().map(|&x| a * x + b * rng.normal()).collect();
    Tensor::new(x_prev.shape().to_vec(), data).expect("same shape")
}

/// Forward posterior mean of `q(x^{n-1} | x^n, x^0)`.
pub fn posterior_mean(xn: &Tensor, x0: &Tensor, n: NoiseLevel, sched: &DiffusionSchedule) -> Result<Tensor> {
    same_shape("posterior_mean", xn, x0)?;
    let (c0, cn) = sched.posterior_coefficients(n);
    Ok(zip_map(x0, xn, |a, b| c0 * a + cn * b))
}

/// A network predicting the noise mixed into `x^n`.
///
/// `xn` is (batch, D), `cond` is (batch, cond_dim) and `levels` holds one
/// noise level per batch row. Returns (batch, D).
pub trait EpsilonModel {
    fn dim(&self) -> usize;

    fn predict(&self, g: &mut Graph, xn: Var, cond: Var, levels: &[NoiseLevel]) -> Result<Var>;
}

fn annotate_levels(err: Error, levels: &[NoiseLevel]) -> Error {
    match err {
        Error::Numeric { op } => {
            let ns: Vec<usize> = levels.iter().map(|l| l.0).collect();
            Error::Numeric {
                op: format!("{op} (noise levels {ns:?})"),
            }
        }
        other => other,
    }
}

/// Noise-matching loss with caller-supplied noise: forms
/// `x^n = sqrt(ab) x0 + sqrt(1 - ab) eps` row by row and returns the mean
/// over all elements of `(eps - eps_hat)^2`.
pub fn training_loss_with_noise(
    g: &mut Graph,
    x0: &Tensor,
    cond: Var,
    levels: &[NoiseLevel],
    eps: &Tensor,
    model: &dyn EpsilonModel,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    same_shape("training_loss", x0, eps)?;
    let (rows, dim) = match *x0.shape() {
        [r, d] => (r, d),
        _ => {
            return Err(Error::dimension(
                "training_loss",
                x0.shape(),
                &[levels.len(), model.dim()],
            ))
        }
    };
    if rows != levels.len() {
        return Err(Error::dimension("training_loss", x0.shape(), &[levels.len()]));
    }
    let mut xn = Vec::with_capacity(rows * dim);
    for (r, &n) in levels.iter().enumerate() {
        let ab = sched.alpha_bar(n);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        xn.extend((0..dim).map(|d| a * x0.row(r)[d] + b * eps.row(r)[d]));
    }
    let run = |g: &mut Graph| -> Result<Var> {
        let xn = g.constant(Tensor::new(vec![rows, dim], xn)?);
        let target = g.constant(eps.clone());
        let pred = model.predict(g, xn, cond, levels)?;
        let diff = g.sub(target, pred)?;
        let sq = g.mul(diff, diff)?;
        g.mean(sq)
    };
    run(g).map_err(|e| annotate_levels(e, levels))
}

/// [`training_loss_with_noise`] with `eps ~ N(0, I)` drawn from `rng`.
pub fn training_loss(
    g: &mut Graph,
    x0: &Tensor,
    cond: Var,
    levels: &[NoiseLevel],
    rng: &mut RngStream,
    model: &dyn EpsilonModel,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let eps = rng.gaussian(x0.shape());
    training_loss_with_noise(g, x0, cond, levels, &eps, model, sched)
}

/// One reverse (denoising) step at level `n` with variance `tilde_beta(n)`:
/// `x^{n-1} = (x^n - beta/sqrt(1 - ab) eps_hat)/sqrt(alpha) + sqrt(tilde_beta) z`.
///
/// `z` must be all zeros at `n = 1`.
pub fn reverse_step(
    xn: &Tensor,
    cond: &Tensor,
    n: NoiseLevel,
    z: &Tensor,
    model: &dyn EpsilonModel,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    if n.0 > sched.len() {
        return Err(Error::Contract(format!(
            "noise level {} outside 1..={}",
            n.0,
            sched.len()
        )));
    }
    same_shape("reverse_step", xn, z)?;
    if n.0 == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("reverse step at n = 1 must use z = 0".into()));
    }
    let rows = xn.shape()[0];
    let mut g = Graph::new();
    let xv = g.constant(xn.clone());
    let cv = g.constant(cond.clone());
    let levels = vec![n; rows];
    let eps_hat = model
        .predict(&mut g, xv, cv, &levels)
        .map_err(|e| annotate_levels(e, &levels))?;
    let eps_hat = g.value(eps_hat);
    same_shape("reverse_step", xn, eps_hat)?;
    let coef = sched.beta(n) / (1.0 - sched.alpha_bar(n)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(n).sqrt();
    let sigma = sched.tilde_beta(n).sqrt();
    let data: Vec<f64> = xn
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &zz)| inv_sqrt_alpha * (x - coef * e) + sigma * zz)
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(format!("reverse_step (noise level {})", n.0)));
    }
    Tensor::new(xn.shape().to_vec(), data)
}

/// Annealed Langevin sampling of `x^0` for every row of `cond`.
///
/// Row `r` draws its initial noise and every `z` from `rngs[r]` only, so a
/// row's result does not depend on the other rows.
pub fn sample(
    cond: &Tensor,
    rngs: &mut [RngStream],
    model: &dyn EpsilonModel,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let rows = cond.shape()[0];
    if rngs.len() != rows {
        return Err(Error::Contract(format!(
            "sample needs one random stream per row: {} rows, {} streams",
            rows,
            rngs.len()
        )));
    }
    let dim = model.dim();
    let mut data = vec![0.0; rows * dim];
    for (r, rng) in rngs.iter_mut().enumerate() {
        rng.fill_normal(&mut data[r * dim..(r + 1) * dim]);
    }
    let mut x = Tensor::new(vec![rows, dim], data)?;
    for n in (1..=sched.len()).rev() {
        let level = sched.level(n)?;
        let mut z = vec![0.0; rows * dim];
        if n > 1 {
            for (r, rng) in rngs.iter_mut().enumerate() {
                rng.fill_normal(&mut z[r * dim..(r + 1) * dim]);
            }
        }
        let z = Tensor::new(vec![rows, dim], z)?;
        x = reverse_step(&x, cond, level, &z, model, sched)?;
    }
    Ok(x)
}
