//! Dense n-d `f64` tensors recorded on a reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass as an
//! append-only arena; appending order is the topological order, so the
//! backward sweep is a single reverse walk. Tensors are addressed by
//! [`TensorId`]. Gradients accumulate into `grad` buffers and are never
//! cleared implicitly; callers zero them between optimizer steps.

mod conv;
mod linear;
mod norm;
mod pool;

pub use norm::BnStats;
pub use pool::PoolKind;

use crate::error::{Result, SpemError};
use crate::param::{ParamId, ParamStore};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// One recorded tensor: its buffer, shape, and provenance.
#[derive(Debug)]
pub struct Tensor {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Op,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param(usize),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Sigmoid(TensorId),
    Relu(TensorId),
    Reshape(TensorId),
    Sum(TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        train: bool,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalPool {
        x: TensorId,
        kind: PoolKind,
        argext: Vec<usize>,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(SpemError::arg(format!(
            "tensor dimensions must be positive, got {shape:?}"
        )));
    }
    if numel(shape) != data_len {
        return Err(SpemError::shape(format!(
            "buffer of {data_len} elements does not fill shape {shape:?}"
        )));
    }
    Ok(())
}

/// Right-aligned broadcast of two shapes; size-1 axes stretch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(SpemError::shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
    }
    Ok(out)
}

/// Per-output-axis element strides for an input broadcast to `out`.
/// Stretched axes get stride 0.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        let axis = offset + i;
        strides[axis] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visit every output index of `out_shape` together with the flat indices
/// into two broadcast inputs, in row-major order.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for o in 0..total {
        f(o, ai, bi);
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            ai += sa[axis];
            bi += sb[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            ai -= sa[axis] * out_shape[axis];
            bi -= sb[axis] * out_shape[axis];
            coords[axis] = 0;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    pub(crate) fn node(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    /// Leaf tensor that does not take gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        check_shape(data.len(), shape)?;
        Ok(self.push(data, shape.to_vec(), false, Op::Leaf))
    }

    /// Leaf tensor that accumulates a gradient during [`Tape::backward`].
    pub fn var(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        check_shape(data.len(), shape)?;
        Ok(self.push(data, shape.to_vec(), true, Op::Leaf))
    }

    /// Leaf bound to a stored parameter. Gradients flow back to the store
    /// via [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        let p = store.get(id);
        self.push(p.data.clone(), p.shape.clone(), true, Op::Param(id.index()))
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(SpemError::arg(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(sa, sb)?;
        let stra = bcast_strides(sa, &out_shape);
        let strb = bcast_strides(sb, &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for_each_bcast(&out_shape, &stra, &strb, |o, ai, bi| {
                out[o] = match kind {
                    BinKind::Add => da[ai] + db[bi],
                    BinKind::Sub => da[ai] - db[bi],
                    BinKind::Mul => da[ai] * db[bi],
                    BinKind::Div => da[ai] / db[bi],
                };
            });
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let op = match kind {
            BinKind::Add => Op::Add(a, b),
            BinKind::Sub => Op::Sub(a, b),
            BinKind::Mul => Op::Mul(a, b),
            BinKind::Div => Op::Div(a, b),
        };
        Ok(self.push(out, out_shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&v| v + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::MulScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n = &self.nodes[a.0];
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel(shape) != n.data.len() {
            return Err(SpemError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                n.shape
            )));
        }
        let data = n.data.clone();
        let rg = n.requires_grad;
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from `loss`; repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(SpemError::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match node.grad {
                Some(ref mut acc) => {
                    for (a, v) in acc.iter_mut().zip(g.iter()) {
                        *a += v;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Take the adjoint buffer for `id`, allocating zeros on first touch.
    pub(crate) fn adj_take(&self, adj: &mut [Option<Vec<f64>>], id: TensorId) -> Vec<f64> {
        adj[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[id.0].data.len()])
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let sign = if matches!(self.nodes[i].op, Op::Sub(_, _)) {
                    -1.0
                } else {
                    1.0
                };
                let out_shape = &self.nodes[i].shape;
                if self.wants(a) {
                    let stra = bcast_strides(&self.nodes[a.0].shape, out_shape);
                    let mut ga = self.adj_take(adj, a);
                    for_each_bcast(out_shape, &stra, &stra, |o, ai, _| ga[ai] += g[o]);
                    adj[a.0] = Some(ga);
                }
                if self.wants(b) {
                    let strb = bcast_strides(&self.nodes[b.0].shape, out_shape);
                    let mut gb = self.adj_take(adj, b);
                    for_each_bcast(out_shape, &strb, &strb, |o, bi, _| gb[bi] += sign * g[o]);
                    adj[b.0] = Some(gb);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = &self.nodes[i].shape;
                let stra = bcast_strides(&self.nodes[a.0].shape, out_shape);
                let strb = bcast_strides(&self.nodes[b.0].shape, out_shape);
                if self.wants(a) {
                    let db = &self.nodes[b.0].data;
                    let mut ga = self.adj_take(adj, a);
                    for_each_bcast(out_shape, &stra, &strb, |o, ai, bi| {
                        ga[ai] += g[o] * db[bi];
                    });
                    adj[a.0] = Some(ga);
                }
                if self.wants(b) {
                    let da = &self.nodes[a.0].data;
                    let mut gb = self.adj_take(adj, b);
                    for_each_bcast(out_shape, &stra, &strb, |o, ai, bi| {
                        gb[bi] += g[o] * da[ai];
                    });
                    adj[b.0] = Some(gb);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = &self.nodes[i].shape;
                let stra = bcast_strides(&self.nodes[a.0].shape, out_shape);
                let strb = bcast_strides(&self.nodes[b.0].shape, out_shape);
                if self.wants(a) {
                    let db = &self.nodes[b.0].data;
                    let mut ga = self.adj_take(adj, a);
                    for_each_bcast(out_shape, &stra, &strb, |o, ai, bi| {
                        ga[ai] += g[o] / db[bi];
                    });
                    adj[a.0] = Some(ga);
                }
                if self.wants(b) {
                    let da = &self.nodes[a.0].data;
                    let db = &self.nodes[b.0].data;
                    let mut gb = self.adj_take(adj, b);
                    for_each_bcast(out_shape, &stra, &strb, |o, ai, bi| {
                        gb[bi] -= g[o] * da[ai] / (db[bi] * db[bi]);
                    });
                    adj[b.0] = Some(gb);
                }
            }
            Op::AddScalar(a) => {
                let a = *a;
                if self.wants(a) {
                    let mut ga = self.adj_take(adj, a);
                    for (gi, go) in ga.iter_mut().zip(g.iter()) {
                        *gi += go;
                    }
                    adj[a.0] = Some(ga);
                }
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                if self.wants(a) {
                    let mut ga = self.adj_take(adj, a);
                    for (gi, go) in ga.iter_mut().zip(g.iter()) {
                        *gi += go * c;
                    }
                    adj[a.0] = Some(ga);
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if self.wants(a) {
                    let s = &self.nodes[i].data;
                    let mut ga = self.adj_take(adj, a);
                    for ((gi, go), &sv) in ga.iter_mut().zip(g.iter()).zip(s.iter()) {
                        *gi += go * sv * (1.0 - sv);
                    }
                    adj[a.0] = Some(ga);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.wants(a) {
                    let x = &self.nodes[a.0].data;
                    let mut ga = self.adj_take(adj, a);
                    for ((gi, go), &xv) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        if xv > 0.0 {
                            *gi += go;
                        }
                    }
                    adj[a.0] = Some(ga);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if self.wants(a) {
                    let mut ga = self.adj_take(adj, a);
                    for (gi, go) in ga.iter_mut().zip(g.iter()) {
                        *gi += go;
                    }
                    adj[a.0] = Some(ga);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.wants(a) {
                    let mut ga = self.adj_take(adj, a);
                    for gi in ga.iter_mut() {
                        *gi += g[0];
                    }
                    adj[a.0] = Some(ga);
                }
            }
            Op::Conv2d { .. } => self.backward_conv2d(i, g, adj),
            Op::BatchNorm { .. } => self.backward_batch_norm(i, g, adj),
            Op::GlobalPool { .. } => self.backward_global_pool(i, g, adj),
            Op::Linear { .. } => self.backward_linear(i, g, adj),
            Op::SoftmaxCrossEntropy { .. } => self.backward_softmax_ce(i, g, adj),
        }
    }

    /// Move accumulated gradients of parameter leaves into the store.
    /// Draining twice adds nothing the second time.
    pub fn accumulate_param_grads(&mut self, store: &mut ParamStore) {
        for node in self.nodes.iter_mut() {
            if let Op::Param(idx) = node.op {
                if let Some(g) = node.grad.take() {
                    store.accumulate(idx, &g);
                }
            }
        }
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
