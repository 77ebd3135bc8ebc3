//! Minimal reverse-mode tensor engine: values, a dynamic tape, named
//! parameters with Adam, and splittable random streams.

mod graph;
mod params;
mod rng;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{AdamConfig, ParameterSet};
pub use rng::RngStream;
pub use tensor::Tensor;

/// Linear layer `x W + b` on a (batch, in) input, with `W` stored as
/// (in, out) under `{prefix}.weight` and `b` as (out) under `{prefix}.bias`.
pub fn linear(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> crate::Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Registers the weights used by [`linear`] with fan-in uniform init.
pub fn init_linear(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> crate::Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    params.insert_uniform(format!("{prefix}.weight"), &[fan_in, fan_out], bound, rng)?;
    params.insert_uniform(format!("{prefix}.bias"), &[fan_out], bound, rng)
}
