//! Multi-layer recurrent encoder producing the conditioning state.

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParameterSet, RngStream, Tensor, Var};

const PREFIX: &str = "encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub input_size: usize,
}

impl EncoderConfig {
    pub fn new(input_size: usize) -> Self {
        EncoderConfig {
            cell: CellKind::Lstm,
            layers: 2,
            hidden: 40,
            input_size,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "encoder needs layers, hidden and input sizes >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-layer hidden (and, for LSTM, cell) vectors for a batch of
/// sequences, each (batch, hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub hidden: Vec<Tensor>,
    pub cell: Vec<Tensor>,
}

impl EncoderState {
    pub fn zeros(cfg: &EncoderConfig, batch: usize) -> Self {
        let z = || (0..cfg.layers).map(|_| Tensor::zeros([batch, cfg.hidden])).collect();
        EncoderState {
            hidden: z(),
            cell: if cfg.cell == CellKind::Lstm { z() } else { Vec::new() },
        }
    }

    /// Top-layer hidden state, the conditioning vector.
    pub fn output(&self) -> &Tensor {
        self.hidden.last().expect("at least one layer")
    }

    /// Repeats row `row` of every tensor `times` times.
    pub fn repeat_row(&self, row: usize, times: usize) -> Self {
        let rep = |t: &Tensor| {
            let r = t.row(row);
            let data = (0..times).flat_map(|_| r.iter().copied()).collect();
            Tensor::new(vec![times, r.len()], data).expect("shape")
        };
        EncoderState {
            hidden: self.hidden.iter().map(rep).collect(),
            cell: self.cell.iter().map(rep).collect(),
        }
    }
}

/// Encoder state recorded on a graph.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

impl GraphState {
    pub fn constant(g: &mut Graph, state: &EncoderState) -> Self {
        GraphState {
            hidden: state.hidden.iter().map(|t| g.constant(t.clone())).collect(),
            cell: state.cell.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    pub fn output(&self) -> Var {
        *self.hidden.last().expect("at least one layer")
    }

    pub fn values(&self, g: &Graph) -> EncoderState {
        EncoderState {
            hidden: self.hidden.iter().map(|&v| g.value(v).clone()).collect(),
            cell: self.cell.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
}

fn lname(layer: usize, part: &str) -> String {
    format!("{PREFIX}.l{layer}.{part}")
}

impl Encoder {
    /// Registers weights with fan-in uniform init; the LSTM forget-gate
    /// bias starts at 1.
    pub fn init(cfg: EncoderConfig, params: &mut ParameterSet, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let k = cfg.cell.gates();
        let bound = 1.0 / (h as f64).sqrt();
        for layer in 0..cfg.layers {
            let input = if layer == 0 { cfg.input_size } else { h };
            params.insert_uniform(lname(layer, "ih.weight"), &[input, k * h], bound, rng)?;
            params.insert_uniform(lname(layer, "hh.weight"), &[h, k * h], bound, rng)?;
            let mut bias = vec![0.0; k * h];
            if cfg.cell == CellKind::Lstm {
                bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
            }
            params.insert(lname(layer, "ih.bias"), Tensor::vector(bias))?;
            params.insert(lname(layer, "hh.bias"), Tensor::zeros([k * h]))?;
        }
        Ok(Encoder { cfg })
    }

    pub fn from_params(cfg: EncoderConfig, params: &ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let mut reference = ParameterSet::new();
        Encoder::init(cfg.clone(), &mut reference, &mut RngStream::new(0))?;
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::dimension(name, t.shape(), p.shape())),
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        Ok(Encoder { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// One time step for a batch: `x` is (batch, input_size).
    pub fn step(&self, g: &mut Graph, params: &ParameterSet, x: Var, prev: &GraphState) -> Result<GraphState> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_size {
            return Err(Error::dimension(
                format!("encoder input (expected width {})", self.cfg.input_size),
                &shape,
                &[self.cfg.input_size],
            ));
        }
        if prev.hidden.len() != self.cfg.layers {
            return Err(Error::Contract(format!(
                "encoder state has {} layers, expected {}",
                prev.hidden.len(),
                self.cfg.layers
            )));
        }
        let h = self.cfg.hidden;
        let mut next = GraphState {
            hidden: Vec::with_capacity(self.cfg.layers),
            cell: Vec::new(),
        };
        let mut input = x;
        for layer in 0..self.cfg.layers {
            let wi = g.param(params, &lname(layer, "ih.weight"))?;
            let bi = g.param(params, &lname(layer, "ih.bias"))?;
            let wh = g.param(params, &lname(layer, "hh.weight"))?;
            let bh = g.param(params, &lname(layer, "hh.bias"))?;
            let hp = prev.hidden[layer];
            let xi = g.matmul(input, wi)?;
            let xi = g.add(xi, bi)?;
            let hh = g.matmul(hp, wh)?;
            let hh = g.add(hh, bh)?;
            let h_new = match self.cfg.cell {
                CellKind::Lstm => {
                    let pre = g.add(xi, hh)?;
                    let i = g.slice(pre, 1, 0, h)?;
                    let f = g.slice(pre, 1, h, h)?;
                    let c_hat = g.slice(pre, 1, 2 * h, h)?;
                    let o = g.slice(pre, 1, 3 * h, h)?;
                    let i = g.sigmoid(i)?;
                    let f = g.sigmoid(f)?;
                    let c_hat = g.tanh(c_hat)?;
                    let o = g.sigmoid(o)?;
                    let keep = g.mul(f, prev.cell[layer])?;
                    let write = g.mul(i, c_hat)?;
                    let c = g.add(keep, write)?;
                    let tc = g.tanh(c)?;
                    next.cell.push(c);
                    g.mul(o, tc)?
                }
                CellKind::Gru => {
                    let xr = g.slice(xi, 1, 0, h)?;
                    let xz = g.slice(xi, 1, h, h)?;
                    let xn = g.slice(xi, 1, 2 * h, h)?;
                    let hr = g.slice(hh, 1, 0, h)?;
                    let hz = g.slice(hh, 1, h, h)?;
                    let hn = g.slice(hh, 1, 2 * h, h)?;
                    let r = g.add(xr, hr)?;
                    let r = g.sigmoid(r)?;
                    let z = g.add(xz, hz)?;
                    let z = g.sigmoid(z)?;
                    let rn = g.mul(r, hn)?;
                    let n = g.add(xn, rn)?;
                    let n = g.tanh(n)?;
                    // h' = (1 - z) n + z h = n + z (h - n)
                    let d = g.sub(hp, n)?;
                    let zd = g.mul(z, d)?;
                    g.add(n, zd)?
                }
            };
            next.hidden.push(h_new);
            input = h_new;
        }
        Ok(next)
    }

    /// Runs [`Encoder::step`] over `inputs`, returning every state.
    pub fn unroll(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        inputs: &[Var],
        initial: &GraphState,
    ) -> Result<Vec<GraphState>> {
        if inputs.is_empty() {
            return Err(Error::Contract("cannot unroll over an empty window".into()));
        }
        let mut states = Vec::with_capacity(inputs.len());
        let mut state = initial.clone();
        for &x in inputs {
            state = self.step(g, params, x, &state)?;
            states.push(state.clone());
        }
        Ok(states)
    }

    /// Value-level step without gradient tracking.
    pub fn step_values(&self, params: &ParameterSet, x: &Tensor, prev: &EncoderState) -> Result<EncoderState> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = GraphState::constant(&mut g, prev);
        Ok(self.step(&mut g, params, xv, &pv)?.values(&g))
    }
}
