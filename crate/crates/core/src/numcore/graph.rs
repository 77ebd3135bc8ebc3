use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Option<Arc<[usize]>>),
    Sub(usize, usize, Option<Arc<[usize]>>),
    Mul(usize, usize, Option<Arc<[usize]>>),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Conv1d {
        input: usize,
        kernel: usize,
        dilation: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Broadcast(usize, Arc<[usize]>),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. A graph is rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: HashMap<usize, Vec<f64>>,
    bound: HashMap<(u64, usize), Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    let bad = data
        .iter()
        .fold(0u64, |acc, x| acc | ((x.to_bits() & EXP) == EXP) as u64);
    if bad == 0 {
        Ok(())
    } else {
        Err(Error::numeric(op))
    }
}

/// Flat index into `src` for every element of an array of shape `dst`,
/// using right-aligned broadcasting. `None` when the shapes are equal.
fn broadcast_map(op: &str, dst: &[usize], src: &[usize]) -> Result<Option<Arc<[usize]>>> {
    if dst == src {
        return Ok(None);
    }
    type MapCache = HashMap<(Vec<usize>, Vec<usize>), Arc<[usize]>>;
    thread_local! {
        static CACHE: RefCell<MapCache> = RefCell::new(HashMap::new());
    }
    let key = (dst.to_vec(), src.to_vec());
    if let Some(m) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return Ok(Some(m));
    }
    let map = build_broadcast_map(op, dst, src)?;
    CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() >= 512 {
            c.clear();
        }
        c.insert(key, map.clone());
    });
    Ok(Some(map))
}

fn build_broadcast_map(op: &str, dst: &[usize], src: &[usize]) -> Result<Arc<[usize]>> {
    if src.len() > dst.len() {
        return Err(Error::dimension(op, dst, src));
    }
    let lead = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let (s, d) = (src[i], dst[lead + i]);
        if s == d {
            strides[lead + i] = acc;
        } else if s != 1 {
            return Err(Error::dimension(op, dst, src));
        }
        acc *= s;
    }
    let numel: usize = dst.iter().product();
    let mut map = Vec::with_capacity(numel);
    fill_map(dst, &strides, 0, 0, &mut map);
    Ok(map.into())
}

fn fill_map(dst: &[usize], strides: &[usize], axis: usize, base: usize, out: &mut Vec<usize>) {
    let (n, st) = (dst[axis], strides[axis]);
    if axis + 1 == dst.len() {
        out.extend((0..n).map(|i| base + i * st));
    } else {
        for i in 0..n {
            fill_map(dst, strides, axis + 1, base + i * st, out);
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Normalized view of a convolution input: (batch, channels, length).
fn conv_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c, d] => Some((1, c, d)),
        [b, c, d] => Some((b, c, d)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: HashMap::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::Graph("value does not belong to this graph".into()));
        }
        Ok(v.id)
    }

    fn push(&mut self, op: &str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        check_finite(op, value.data())?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var { id, graph: self.id })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v).expect("foreign var")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v).expect("foreign var")].requires_grad
    }

    /// Leaf that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Leaf, false).expect("non-finite constant")
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// Binds the named parameter of `params` as a differentiable leaf.
    /// Repeated calls return the same handle.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let ix = params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.bound.get(&(params.id(), ix)) {
            return Ok(v);
        }
        let v = self.variable(params.value_at(ix).clone())?;
        self.bound.insert((params.id(), ix), v);
        Ok(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let id = self.index(v).ok()?;
        let g = self.grads.get(&id)?;
        Some(Tensor::new(self.nodes[id].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every parameter of `params` bound on this graph.
    pub(crate) fn bound_grads<'a>(&'a self, params: &'a ParameterSet) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
        self.bound
            .iter()
            .filter(move |((pid, _), _)| *pid == params.id())
            .filter_map(move |((_, ix), v)| self.grads.get(&v.id).map(|g| (*ix, g.as_slice())))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let map = broadcast_map(name, va.shape(), vb.shape())?;
        let (xa, xb) = (va.data(), vb.data());
        let out: Vec<f64> = match &map {
            None => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => xa.iter().zip(m.iter()).map(|(&x, &j)| f(x, xb[j])).collect(),
        };
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[ia, ib]);
        let op = match name {
            "add" => Op::Add(ia, ib, map),
            "sub" => Op::Sub(ia, ib, map),
            _ => Op::Mul(ia, ib, map),
        };
        self.push(name, t, op, rg)
    }

    /// Elementwise sum. `b` may broadcast to the shape of `a`
    /// (right-aligned, size-1 axes stretched).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[ia]);
        self.push("scale", t, Op::Scale(ia, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect())?;
        let rg = self.rg(&[ia]);
        self.push("add_scalar", t, Op::Shift(ia), rg)
    }

    /// (m, k) x (k, n) -> (m, n). Each output row depends only on the
    /// matching input row, with a summation order independent of `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::dimension("matmul", sa, sb)),
        };
        let (xa, xb) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = xa[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &xb[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[ia, ib]);
        self.push("matmul", t, Op::MatMul(ia, ib), rg)
    }

    /// Circular 1-D convolution with a centred kernel.
    ///
    /// `input` is (channels_in, D) or (batch, channels_in, D); `kernel` is
    /// (channels_out, channels_in, k) with k odd. Output position d reads
    /// input positions (d + j*dilation - (k-1)/2*dilation) mod D.
    pub fn conv1d_circular(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (ix, iw) = (self.index(input)?, self.index(kernel)?);
        let (vx, vw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let (batch, cin, len) =
            conv_dims(vx.shape()).ok_or_else(|| Error::dimension("conv1d_circular", vx.shape(), vw.shape()))?;
        let (cout, k) = match *vw.shape() {
            [o, c, k] if c == cin => (o, k),
            _ => return Err(Error::dimension("conv1d_circular", vx.shape(), vw.shape())),
        };
        if k % 2 == 0 {
            return Err(Error::Contract(format!(
                "conv1d_circular: even kernel size {k} is unsupported"
            )));
        }
        if dilation == 0 {
            return Err(Error::Contract("conv1d_circular: dilation must be >= 1".into()));
        }
        if dilation * (k - 1) >= 2 * len {
            log::warn!(
                "conv1d_circular: dilation {dilation} with kernel {k} spans more than twice the spatial size {len}; indices wrap"
            );
        }
        let taps = conv_taps(k, dilation, len);
        let (x, w) = (vx.data(), vw.data());
        let ck = cin * k;
        let mut out = vec![0.0; batch * cout * len];
        let mut wt = vec![0.0; ck * cout];
        for o in 0..cout {
            for p in 0..ck {
                wt[p * cout + o] = w[o * ck + p];
            }
        }
        let mut cols = vec![0.0; len * ck];
        let mut tmp = vec![0.0; len * cout];
        for b in 0..batch {
            im2col(&x[b * cin * len..(b + 1) * cin * len], cin, len, k, &taps, &mut cols);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for d in 0..len {
                let trow = &mut tmp[d * cout..(d + 1) * cout];
                for (p, &a) in cols[d * ck..(d + 1) * ck].iter().enumerate() {
                    axpy(a, &wt[p * cout..(p + 1) * cout], trow);
                }
            }
            let ob = &mut out[b * cout * len..(b + 1) * cout * len];
            for o in 0..cout {
                for d in 0..len {
                    ob[o * len + d] = tmp[d * cout + o];
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = cout;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[ix, iw]);
        self.push(
            "conv1d_circular",
            t,
            Op::Conv1d {
                input: ix,
                kernel: iw,
                dilation,
            },
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let ids = inputs.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::dimension("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&ids);
        self.push("concat", t, Op::Concat { inputs: ids, axis }, rg)
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.index(input)?;
        let v = &self.nodes[ix].value;
        let s = v.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dimension("slice", s, &[axis, start, len]));
        }
        let (outer, inner) = outer_inner(s, axis);
        let full = s[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[ix]);
        self.push("slice", t, Op::Slice { input: ix, axis, start }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(input)?;
        let t = self.nodes[ix].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[ix]);
        self.push("reshape", t, Op::Reshape(ix), rg)
    }

    /// Broadcasts `input` to `shape` (right-aligned; e.g. (B, C, 1) -> (B, C, D)).
    pub fn broadcast_to(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(input)?;
        let v = &self.nodes[ix].value;
        let map = broadcast_map("broadcast_to", shape, v.shape())?
            .unwrap_or_else(|| (0..v.numel()).collect::<Vec<_>>().into());
        let out = map.iter().map(|&j| v.data()[j]).collect();
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[ix]);
        self.push("broadcast_to", t, Op::Broadcast(ix, map), rg)
    }

    fn unary(&mut self, name: &str, input: Var, f: fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.index(input)?;
        let v = &self.nodes[ix].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[ix]);
        self.push(name, t, op(ix), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus)
    }

    fn reduce(&mut self, name: &str, x: Var, f: fn(&[f64]) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.index(x)?;
        let t = Tensor::scalar(f(self.nodes[ix].value.data()));
        let rg = self.rg(&[ix]);
        self.push(name, t, op(ix), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce("sum", x, |d| d.iter().sum(), Op::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce("mean", x, |d| d.iter().sum::<f64>() / d.len() as f64, Op::Mean)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        self.reduce("sum_squares", x, |d| d.iter().map(|v| v * v).sum(), Op::SumSquares)
    }

    /// Reverse pass from a scalar root. Gradients of leaves that require
    /// grad are accumulated (`+=`) across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root = self.index(root)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adj[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.grads.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let wants = |i: usize| nodes[i].requires_grad;
        let acc = |adj: &mut [Option<Vec<f64>>], i: usize, f: &mut dyn FnMut(&mut [f64])| {
            let n = nodes[i].value.numel();
            let slot = adj[i].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b, map) | Op::Sub(a, b, map) => {
                let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    acc(adj, *a, &mut |s| s.iter_mut().zip(g).for_each(|(s, v)| *s += v));
                }
                if wants(*b) {
                    acc(adj, *b, &mut |s| match map {
                        None => s.iter_mut().zip(g).for_each(|(s, v)| *s += sign * v),
                        Some(m) => m.iter().zip(g).for_each(|(&j, v)| s[j] += sign * v),
                    });
                }
            }
            Op::Mul(a, b, map) => {
                let (xa, xb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*a) {
                    acc(adj, *a, &mut |s| match map {
                        None => s.iter_mut().zip(g.iter().zip(xb)).for_each(|(s, (v, y))| *s += v * y),
                        Some(m) => s
                            .iter_mut()
                            .zip(g.iter().zip(m.iter()))
                            .for_each(|(s, (v, &j))| *s += v * xb[j]),
                    });
                }
                if wants(*b) {
                    acc(adj, *b, &mut |s| match map {
                        None => s.iter_mut().zip(g.iter().zip(xa)).for_each(|(s, (v, x))| *s += v * x),
                        Some(m) => m.iter().zip(g.iter().zip(xa)).for_each(|(&j, (v, x))| s[j] += v * x),
                    });
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(adj, *a, &mut |s| s.iter_mut().zip(g).for_each(|(s, v)| *s += c * v));
                }
            }
            Op::Shift(a) => {
                if wants(*a) {
                    acc(adj, *a, &mut |s| s.iter_mut().zip(g).for_each(|(s, v)| *s += v));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let (xa, xb) = (va.data(), vb.data());
                if wants(*a) {
                    acc(adj, *a, &mut |s| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &xb[p * n..(p + 1) * n];
                                s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(adj, *b, &mut |s| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = xa[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (sv, gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *sv += aip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Conv1d {
                input,
                kernel,
                dilation,
            } => {
                let (vx, vw) = (&nodes[*input].value, &nodes[*kernel].value);
                let (batch, cin, len) = conv_dims(vx.shape()).expect("conv shape");
                let (cout, k) = (vw.shape()[0], vw.shape()[2]);
                let taps = conv_taps(k, *dilation, len);
                let (x, w) = (vx.data(), vw.data());
                let ck = cin * k;
                let mut cols = vec![0.0; len * ck];
                if wants(*input) {
                    let mut dcols = vec![0.0; len * ck];
                    acc(adj, *input, &mut |s| {
                        for b in 0..batch {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            for o in 0..cout {
                                let wrow = &w[o * ck..(o + 1) * ck];
                                for d in 0..len {
                                    let gv = g[(b * cout + o) * len + d];
                                    if gv != 0.0 {
                                        axpy(gv, wrow, &mut dcols[d * ck..(d + 1) * ck]);
                                    }
                                }
                            }
                            let sb = &mut s[b * cin * len..(b + 1) * cin * len];
                            for d in 0..len {
                                for c in 0..cin {
                                    for j in 0..k {
                                        sb[c * len + taps[d * k + j]] += dcols[d * ck + c * k + j];
                                    }
                                }
                            }
                        }
                    });
                }
                if wants(*kernel) {
                    acc(adj, *kernel, &mut |s| {
                        for b in 0..batch {
                            im2col(&x[b * cin * len..(b + 1) * cin * len], cin, len, k, &taps, &mut cols);
                            for o in 0..cout {
                                for d in 0..len {
                                    let gv = g[(b * cout + o) * len + d];
                                    if gv != 0.0 {
                                        axpy(gv, &cols[d * ck..(d + 1) * ck], &mut s[o * ck..(o + 1) * ck]);
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let chunk = nodes[i].value.shape()[*axis] * inner;
                    if wants(i) {
                        acc(adj, i, &mut |s| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                for (sv, gv) in s[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                    *sv += gv;
                                }
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                if wants(*input) {
                    let in_shape = nodes[*input].value.shape();
                    let (outer, inner) = outer_inner(in_shape, *axis);
                    let full = in_shape[*axis] * inner;
                    let chunk = out.shape()[*axis] * inner;
                    acc(adj, *input, &mut |s| {
                        for o in 0..outer {
                            let base = o * full + start * inner;
                            for (sv, gv) in s[base..base + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                                *sv += gv;
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    acc(adj, *a, &mut |s| s.iter_mut().zip(g).for_each(|(s, v)| *s += v));
                }
            }
            Op::Broadcast(a, map) => {
                if wants(*a) {
                    acc(adj, *a, &mut |s| map.iter().zip(g).for_each(|(&j, v)| s[j] += v));
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let y = out.data();
                    acc(adj, *a, &mut |s| {
                        for ((sv, gv), yv) in s.iter_mut().zip(g).zip(y) {
                            *sv += gv * yv * (1.0 - yv);
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let y = out.data();
                    acc(adj, *a, &mut |s| {
                        for ((sv, gv), yv) in s.iter_mut().zip(g).zip(y) {
                            *sv += gv * (1.0 - yv * yv);
                        }
                    });
                }
            }
            Op::Softplus(a) => {
                if wants(*a) {
                    let x = nodes[*a].value.data();
                    acc(adj, *a, &mut |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(x) {
                            *sv += gv * sigmoid(*xv);
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc(adj, *a, &mut |s| s.iter_mut().for_each(|sv| *sv += g[0]));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = nodes[*a].value.numel() as f64;
                    acc(adj, *a, &mut |s| s.iter_mut().for_each(|sv| *sv += g[0] / n));
                }
            }
            Op::SumSquares(a) => {
                if wants(*a) {
                    let x = nodes[*a].value.data();
                    acc(adj, *a, &mut |s| {
                        for (sv, xv) in s.iter_mut().zip(x) {
                            *sv += 2.0 * g[0] * xv;
                        }
                    });
                }
            }
        }
    }
}

/// Source offset (mod `len`) for each kernel tap.
/// Source position for every (output position, tap): `taps[d * k + j]`
/// is `(d + j*dilation - (k-1)/2*dilation) mod len`.
fn conv_taps(k: usize, dilation: usize, len: usize) -> Vec<usize> {
    let centre = ((k - 1) / 2 * dilation) as i64;
    let mut taps = Vec::with_capacity(len * k);
    for d in 0..len {
        for j in 0..k {
            taps.push((d as i64 + (j * dilation) as i64 - centre).rem_euclid(len as i64) as usize);
        }
    }
    taps
}

/// Gathers one batch element (cin, len) into rows `cols[d]` of length
/// `cin * k`, ordered channel-major then tap.
fn im2col(x: &[f64], cin: usize, len: usize, k: usize, taps: &[usize], cols: &mut [f64]) {
    let ck = cin * k;
    for d in 0..len {
        let row = &mut cols[d * ck..(d + 1) * ck];
        for c in 0..cin {
            let xrow = &x[c * len..(c + 1) * len];
            for j in 0..k {
                row[c * k + j] = xrow[taps[d * k + j]];
            }
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
