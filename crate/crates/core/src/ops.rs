//! Forward operations recorded on a [`Tape`].
//!
//! Broadcasting is limited to leading-batch expansion: the right operand of
//! [`Tape::add`] and [`Tape::mul`] may match only the trailing axes of the
//! left operand. Anything else needs an explicit reshape.

use crate::error::{Error, Result};
use crate::tape::{sigmoid, split_axis, transpose_data, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn check_rank(&self, op: &'static str, x: Var, rank: usize) -> Result<()> {
        if self.shape(x).len() != rank {
            return Err(Error::invalid(format!(
                "{op}: expected rank {rank}, got shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn check_trailing(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..k {
                let s = av[r * k + c];
                let brow = &bv[c * n..(c + 1) * n];
                for (o, bj) in orow.iter_mut().zip(brow) {
                    *o += s * bj;
                }
            }
        }
        Ok(self.emit(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_trailing("add", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(j, v)| v + bv[j % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_trailing("mul", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(j, v)| v * bv[j % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    /// Multiplies every entry of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.emit(shape, out, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.emit(shape, out, Op::Scale { x, c }, &[x])
    }

    /// `len` entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{} outside axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.emit(oshape, out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        self.check_axis("concat", first, axis)?;
        let base_shape = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let xv = self.value(x).data();
                out.extend_from_slice(&xv[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        Ok(self.emit(shape, out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_rank("transpose", x, 2)?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let out = transpose_data(self.value(x).data(), r, c);
        Ok(self.emit(vec![c, r], out, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).data().to_vec();
        Ok(self.emit(shape.to_vec(), out, Op::Reshape { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x).data(), &shape, axis, false);
        Ok(self.emit(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x).data(), &shape, axis, true);
        Ok(self.emit(shape, out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.emit(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(shape, out, Op::Sigmoid { x }, &[x])
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(shape, out, Op::Swish { x }, &[x])
    }

    /// Gated linear unit over the last axis: first half times sigmoid of second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let c2 = self.value(x).cols();
        if c2 % 2 != 0 {
            return Err(Error::invalid(format!(
                "glu: last axis must be even, got {:?}",
                self.shape(x)
            )));
        }
        let half = c2 / 2;
        let xv = self.value(x).data();
        let rows = xv.len() / c2;
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            let row = &xv[r * c2..(r + 1) * c2];
            for c in 0..half {
                out.push(row[c] * sigmoid(row[half + c]));
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = half;
        Ok(self.emit(shape, out, Op::Glu { x }, &[x]))
    }

    /// Per-channel convolution over time with centered same-padding.
    ///
    /// `x` is `[T, C]`, `kernel` is `[C, K]` with odd `K`; output is `[T, C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.check_rank("depthwise_conv1d", x, 2)?;
        self.check_rank("depthwise_conv1d", kernel, 2)?;
        let (t_len, ch) = (self.shape(x)[0], self.shape(x)[1]);
        let (kc, k) = (self.shape(kernel)[0], self.shape(kernel)[1]);
        if kc != ch {
            return Err(Error::dim("depthwise_conv1d", self.shape(x), self.shape(kernel)));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!(
                "depthwise_conv1d: kernel width must be odd, got {k}"
            )));
        }
        let pad = k / 2;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; t_len * ch];
        for t in 0..t_len {
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                for c in 0..ch {
                    out[t * ch + c] += kv[c * k + j] * xv[src * ch + c];
                }
            }
        }
        Ok(self.emit(vec![t_len, ch], out, Op::DepthwiseConv1d { x, kernel }, &[x, kernel]))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_rank("embedding", table, 2)?;
        let (v, d) = (self.shape(table)[0], self.shape(table)[1]);
        if ids.is_empty() {
            return Err(Error::invalid("embedding: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::invalid(format!("embedding: id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.emit(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("masked_fill", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.emit(shape, out, Op::MaskedFill { x, mask: mask.to_vec() }, &[x]))
    }

    /// Reduces `axis` with a stable log-sum-exp. A rank-1 input yields `[1]`.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_sum_exp", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let vals = (0..n).map(|t| xv[(o * n + t) * inner + j]);
                out[o * inner + j] = log_sum_exp(vals);
            }
        }
        let mut oshape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.emit(oshape, out, Op::LogSumExp { x, axis }, &[x]))
    }

    /// Sum of all entries, as `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.emit(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Records a scalar-valued function of `x` whose value and gradient were
    /// computed outside the tape.
    pub fn custom_scalar(&mut self, x: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(x).numel() {
            return Err(Error::dim("custom_scalar", self.shape(x), &[local_grad.len()]));
        }
        Ok(self.emit(vec![1], vec![value], Op::Custom { x, local_grad }, &[x]))
    }
}

/// Stable `log Σ exp(v)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_along(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |t: usize| (o * n + t) * inner + j;
            let lse = log_sum_exp((0..n).map(|t| x[idx(t)]));
            for t in 0..n {
                let l = x[idx(t)] - lse;
                out[idx(t)] = if log { l } else { l.exp() };
            }
        }
    }
    out
}

/// Softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    softmax_along(x, &[x.len()], 0, false)
}
