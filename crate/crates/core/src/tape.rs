//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its output value and the
//! information its gradient rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse order of execution. A tape supports one backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `b` is either the same shape as `a` or matches its trailing axes.
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sigmoid {
        x: Var,
    },
    Swish {
        x: Var,
    },
    Glu {
        x: Var,
    },
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    /// Scalar function of `x` whose local gradient was computed in forward.
    Custom {
        x: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node that required grad; `None` for constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a one-element `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("tape already consumed by a backward pass".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::new(shape, data).expect("grad shape"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bv = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &bv[c * n..(c + 1) * n];
                            da[r * k + c] = dot(grow, brow);
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let av = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let s = av[r * k + c];
                            if s != 0.0 {
                                axpy(s, grow, &mut db[c * n..(c + 1) * n]);
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, fold_leading(g, self.data(*b).len()));
                }
            }
            Op::Mul { a, b } => {
                let av = self.data(*a);
                let bv = self.data(*b);
                let nb = bv.len();
                if self.wants(*a) {
                    let da = g.iter().enumerate().map(|(j, gj)| gj * bv[j % nb]).collect();
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gj, aj)| gj * aj).collect();
                    accumulate(grads, *b, fold_leading(&prod, nb));
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.data(*s)[0];
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * sv).collect());
                }
                if self.wants(*s) {
                    accumulate(grads, *s, vec![dot(g, self.data(*x))]);
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, nx, inner) = split_axis(xs, *axis);
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![0.0; self.data(*x).len()];
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = (o * nx + start) * inner;
                        for (d, s) in dx[dst..dst + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for x in xs {
                    let len = self.shape(*x)[*axis];
                    if self.wants(*x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, *x, dx);
                    }
                    offset += len;
                }
            }
            Op::Transpose { x } => {
                if self.wants(*x) {
                    let s = node.value.shape();
                    accumulate(grads, *x, transpose_data(g, s[0], s[1]));
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |t: usize| (o * n + t) * inner + j;
                            let s: f64 = (0..n).map(|t| g[idx(t)] * out[idx(t)]).sum();
                            for t in 0..n {
                                dx[idx(t)] = out[idx(t)] * (g[idx(t)] - s);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LogSoftmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |t: usize| (o * n + t) * inner + j;
                            let s: f64 = (0..n).map(|t| g[idx(t)]).sum();
                            for t in 0..n {
                                dx[idx(t)] = g[idx(t)] - out[idx(t)].exp() * s;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let rows = g.len() / d;
                let gv = self.data(*gamma);
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, fold_leading(g, d));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = g[row.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, &xhat[row.clone()]) / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let dx = g.iter().zip(out).map(|(gj, y)| gj * y * (1.0 - y)).collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Swish { x } => {
                if self.wants(*x) {
                    let dx = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gj, &v)| {
                            let s = sigmoid(v);
                            gj * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Glu { x } => {
                if self.wants(*x) {
                    let xv = self.data(*x);
                    let half = node.value.cols();
                    let rows = g.len() / half;
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        for c in 0..half {
                            let a = xv[r * 2 * half + c];
                            let s = sigmoid(xv[r * 2 * half + half + c]);
                            let gj = g[r * half + c];
                            dx[r * 2 * half + c] = gj * s;
                            dx[r * 2 * half + half + c] = gj * a * s * (1.0 - s);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let xv = self.data(*x);
                let kv = self.data(*kernel);
                let (t_len, ch) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*kernel)[1];
                let pad = k / 2;
                let want_x = self.wants(*x);
                let want_k = self.wants(*kernel);
                let mut dx = vec![0.0; if want_x { xv.len() } else { 0 }];
                let mut dk = vec![0.0; if want_k { kv.len() } else { 0 }];
                for t in 0..t_len {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for c in 0..ch {
                            let gj = g[t * ch + c];
                            if want_x {
                                dx[src * ch + c] += gj * kv[c * k + j];
                            }
                            if want_k {
                                dk[c * k + j] += gj * xv[src * ch + c];
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(grads, *x, dx);
                }
                if want_k {
                    accumulate(grads, *kernel, dk);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = node.value.cols();
                    let mut dt = vec![0.0; self.data(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::MaskedFill { x, mask } => {
                if self.wants(*x) {
                    let dx = g.iter().zip(mask).map(|(&gj, &m)| if m { 0.0 } else { gj }).collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::LogSumExp { x, axis } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let xv = self.data(*x);
                    let (outer, n, inner) = split_axis(xs, *axis);
                    let mut dx = vec![0.0; xv.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let r = o * inner + j;
                            for t in 0..n {
                                let idx = (o * n + t) * inner + j;
                                dx[idx] = g[r] * (xv[idx] - out[r]).exp();
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    accumulate(grads, *x, vec![g[0]; self.data(*x).len()]);
                }
            }
            Op::Custom { x, local_grad } => {
                if self.wants(*x) {
                    accumulate(grads, *x, local_grad.iter().map(|v| v * g[0]).collect());
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Sums `g` over repeated leading blocks of length `n`.
fn fold_leading(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
