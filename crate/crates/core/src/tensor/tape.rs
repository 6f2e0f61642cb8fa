//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! A [`Tape`] owns every intermediate value produced during one forward
//! pass. Parameters enter the tape through [`Tape::param`], which snapshots the
//! current value from a [`ParamStore`]; [`Tape::backward`] then replays the tape
//! in reverse and accumulates gradients back into the store.
//!
//! Binary element-wise ops broadcast numpy-style (trailing axes aligned, unit
//! extents stretch). Comparison and logical ops produce 0/1 constants and never
//! propagate gradient.

use std::collections::HashMap;

use super::array::{axis_split, broadcast_offsets, broadcast_shape, check_axis, numel};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How an operand's elements map onto the elements of a broadcast result.
enum Plan {
    Same,
    Repeat(usize),
    Spread(usize),
    General(Vec<usize>),
}

impl Plan {
    fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        if out_shape == in_shape {
            return Plan::Same;
        }
        let trimmed: &[usize] = {
            let lead = in_shape.iter().take_while(|&&d| d == 1).count();
            &in_shape[lead..]
        };
        if trimmed.len() <= out_shape.len() && out_shape.ends_with(trimmed) {
            return Plan::Repeat(numel(trimmed).max(1));
        }
        let ones = in_shape.iter().rev().take_while(|&&d| d == 1).count();
        let keep = in_shape.len() - ones;
        if in_shape.len() == out_shape.len() && in_shape[..keep] == out_shape[..keep] {
            return Plan::Spread(numel(&out_shape[keep..]).max(1));
        }
        Plan::General(broadcast_offsets(out_shape, in_shape))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Plan::Same => i,
            Plan::Repeat(len) => i % len,
            Plan::Spread(inner) => i / inner,
            Plan::General(offsets) => offsets[i],
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Param(ParamId),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Sin(Var),
    Exp(Var),
    Ln(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared: bool,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Cumsum {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<Option<f64>>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter. Repeated calls for the same id return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    // ---- element-wise ------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let pa = Plan::new(&shape, av.shape());
        let pb = Plan::new(&shape, bv.shape());
        let n = numel(&shape);
        let data = match kind {
            BinaryKind::Add => zip_plans(ad, bd, &pa, &pb, n, |x, y| x + y),
            BinaryKind::Sub => zip_plans(ad, bd, &pa, &pb, n, |x, y| x - y),
            BinaryKind::Mul => zip_plans(ad, bd, &pa, &pb, n, |x, y| x * y),
            BinaryKind::Div => zip_plans(ad, bd, &pa, &pb, n, |x, y| x / y),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Binary(kind, a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `max(x, c)`; gradient passes where `x > c`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    fn compare(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> bool) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let pa = Plan::new(&shape, av.shape());
        let pb = Plan::new(&shape, bv.shape());
        let data = (0..numel(&shape))
            .map(|i| {
                if f(av.data()[pa.at(i)], bv.data()[pb.at(i)]) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok(self.constant(Tensor::from_parts(shape, data)))
    }

    /// `a >= b` as 0/1; a gradient barrier.
    pub fn ge(&mut self, a: Var, b: Var) -> Result<Var> {
        self.compare("ge", a, b, |x, y| x >= y)
    }

    /// `(a != 0) && (b != 0)` as 0/1; a gradient barrier.
    pub fn and(&mut self, a: Var, b: Var) -> Result<Var> {
        self.compare("and", a, b, |x, y| x != 0.0 && y != 0.0)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `x[..., k] @ w[k, n]` with a weight shared across all leading axes.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(mismatch());
        }
        let k = ws[0];
        let n = ws[1];
        let m = numel(&xs[..xs.len() - 1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            &mut out,
        );
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: x,
                b: w,
                batch: 1,
                m,
                k,
                n,
                shared: true,
            },
            rg,
        ))
    }

    /// Batch matrix product over matching leading axes:
    /// `[..., p, q] x [..., q, r] -> [..., p, r]`, or the batched
    /// matrix-vector form `[..., p, q] x [..., q] -> [..., p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "bmm",
            lhs: as_.clone(),
            rhs: bs.clone(),
        };
        if as_.len() < 2 {
            return Err(mismatch());
        }
        let lead = &as_[..as_.len() - 2];
        let (p, q) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (vector, r) = if bs.len() == as_.len() {
            if &bs[..bs.len() - 2] != lead || bs[bs.len() - 2] != q {
                return Err(mismatch());
            }
            (false, bs[bs.len() - 1])
        } else if bs.len() + 1 == as_.len() {
            if &bs[..bs.len() - 1] != lead || bs[bs.len() - 1] != q {
                return Err(mismatch());
            }
            (true, 1)
        } else {
            return Err(mismatch());
        };
        let batch = numel(lead);
        let mut out = vec![0.0; batch * p * r];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                gemm(
                    p,
                    q,
                    r,
                    &ad[bi * p * q..(bi + 1) * p * q],
                    (q as isize, 1),
                    &bd[bi * q * r..(bi + 1) * q * r],
                    (r as isize, 1),
                    &mut out[bi * p * r..(bi + 1) * p * r],
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.push(p);
        if !vector {
            shape.push(r);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m: p,
                k: q,
                n: r,
                shared: false,
            },
            rg,
        ))
    }

    /// Row lookup: `table[v, d]` indexed by `indices` of shape `index_shape`.
    pub fn gather(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(index_shape) != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: ts,
                rhs: index_shape.to_vec(),
            });
        }
        let (rows, d) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::IndexOutOfRange { index: ix, rows });
            }
            out.extend_from_slice(&td[ix * d..(ix + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- layout ------------------------------------------------------------

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len()
            || perm
                .iter()
                .any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: xs,
                rhs: perm.to_vec(),
            });
        }
        let mut in_strides = vec![1usize; xs.len()];
        for i in (0..xs.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * xs[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = strided_offsets(&out_shape, &strides);
        let xd = self.value(x).data();
        let data = map.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute { x, map },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- reductions and scans ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis(&xs, axis)?;
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = xs;
        shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, rg))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis(&xs, axis)?;
        let (outer, n, inner) = axis_split(&xs, axis);
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for j in 1..n {
                for i in 0..inner {
                    let prev = data[(o * n + j - 1) * inner + i];
                    data[(o * n + j) * inner + i] += prev;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(xs, data), Op::Cumsum { x, axis }, rg))
    }

    // ---- normalisation -----------------------------------------------------

    /// Softmax along `axis` restricted to positions where `mask` (0/1,
    /// broadcastable to `x`) is non-zero. Masked positions get probability 0
    /// and a fully-masked slice is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor>, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis(&xs, axis)?;
        let keep: Option<Vec<bool>> = match mask {
            None => None,
            Some(m) => {
                let shape = broadcast_shape("masked_softmax", &xs, m.shape())?;
                if shape != xs {
                    return Err(Error::ShapeMismatch {
                        op: "masked_softmax",
                        lhs: xs,
                        rhs: m.shape().to_vec(),
                    });
                }
                let plan = Plan::new(&xs, m.shape());
                Some((0..numel(&xs)).map(|i| m.data()[plan.at(i)] != 0.0).collect())
            }
        };
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let live = |j: usize| keep.as_ref().is_none_or(|k| k[idx(j)]);
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if live(j) {
                        max = max.max(xd[idx(j)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..n {
                    if live(j) {
                        let e = (xd[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(xs, out), Op::Softmax { x, axis }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, None, axis)
    }

    /// Layer normalisation over the last axis followed by `gain * z + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = numel(&xs) / d.max(1);
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let z = (row[j] - mean) * is;
                xhat[r * d + j] = z;
                out[r * d + j] = g[j] * z + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean softmax cross-entropy over rows of `logits[n, c]` that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls,
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (ls[0], ls[1]);
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        let mut count = 0;
        for r in 0..n {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / total;
            }
            if let Some(t) = targets[r] {
                if t >= c {
                    return Err(Error::IndexOutOfRange { index: t, rows: c });
                }
                loss += total.ln() + max - row[t];
                count += 1;
            }
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits over entries that carry a target.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Option<f64>]) -> Result<Var> {
        let ld = self.value(logits).data();
        if ld.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut loss = 0.0;
        let mut count = 0;
        for (&z, t) in ld.iter().zip(targets) {
            if let Some(y) = t {
                loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                count += 1;
            }
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                count,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d`loss` back through the tape and adds parameter gradients
    /// into `store`. `loss` must hold a single element.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                for (acc, v) in store.grad_mut(*pid).data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
            Op::Binary(kind, a, b) => {
                let shape = node.value.shape();
                let av = self.value(*a);
                let bv = self.value(*b);
                let pa = Plan::new(shape, av.shape());
                let pb = Plan::new(shape, bv.shape());
                let (ad, bd) = (av.data(), bv.data());
                if self.rg(*a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => self.scatter(grads, *a, &pa, g.iter().copied()),
                        BinaryKind::Mul => {
                            self.scatter(grads, *a, &pa, g.iter().enumerate().map(|(i, &gi)| gi * bd[pb.at(i)]))
                        }
                        BinaryKind::Div => {
                            self.scatter(grads, *a, &pa, g.iter().enumerate().map(|(i, &gi)| gi / bd[pb.at(i)]))
                        }
                    }
                }
                if self.rg(*b) {
                    match kind {
                        BinaryKind::Add => self.scatter(grads, *b, &pb, g.iter().copied()),
                        BinaryKind::Sub => self.scatter(grads, *b, &pb, g.iter().map(|&gi| -gi)),
                        BinaryKind::Mul => {
                            self.scatter(grads, *b, &pb, g.iter().enumerate().map(|(i, &gi)| gi * ad[pa.at(i)]))
                        }
                        BinaryKind::Div => self.scatter(
                            grads,
                            *b,
                            &pb,
                            g.iter().enumerate().map(|(i, &gi)| {
                                let y = bd[pb.at(i)];
                                -gi * ad[pa.at(i)] / (y * y)
                            }),
                        ),
                    }
                }
            }
            Op::Scale(x, c) => self.accumulate_unary(grads, *x, g, |gi, _, _| gi * c),
            Op::Offset(x) => self.accumulate_unary(grads, *x, g, |gi, _, _| gi),
            Op::Relu(x) => {
                self.accumulate_unary(grads, *x, g, |gi, xi, _| if xi > 0.0 { gi } else { 0.0 })
            }
            Op::ClampMin(x, c) => {
                self.accumulate_unary(grads, *x, g, |gi, xi, _| if xi > *c { gi } else { 0.0 })
            }
            Op::Tanh(x) => self.accumulate_with_output(grads, *x, g, out, |gi, _, y| gi * (1.0 - y * y)),
            Op::Sigmoid(x) => self.accumulate_with_output(grads, *x, g, out, |gi, _, y| gi * y * (1.0 - y)),
            Op::Sin(x) => self.accumulate_unary(grads, *x, g, |gi, xi, _| gi * xi.cos()),
            Op::Exp(x) => self.accumulate_with_output(grads, *x, g, out, |gi, _, y| gi * y),
            Op::Ln(x) => self.accumulate_unary(grads, *x, g, |gi, xi, _| gi / xi),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.rg(*a) {
                    let ga = self.slot(grads, *a);
                    // dA = dC B^T
                    for bi in 0..batch {
                        let bsl = if *shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            bsl,
                            (1, n as isize),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if self.rg(*b) {
                    let gb = self.slot(grads, *b);
                    // dB = A^T dC
                    for bi in 0..batch {
                        let gsl = if *shared {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        gemm(
                            k,
                            m,
                            n,
                            &ad[bi * m * k..(bi + 1) * m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            gsl,
                        );
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = self.shape(*table)[1];
                let gt = self.slot(grads, *table);
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[ix * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Permute { x, map } => {
                let gx = self.slot(grads, *x);
                for (i, &src) in map.iter().enumerate() {
                    gx[src] += g[i];
                }
            }
            Op::Reshape(x) => {
                let gx = self.slot(grads, *x);
                for (acc, v) in gx.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            Op::Sum(x) => {
                let gx = self.slot(grads, *x);
                for acc in gx.iter_mut() {
                    *acc += g[0];
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Cumsum { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut acc = 0.0;
                        for j in (0..n).rev() {
                            acc += g[(o * n + j) * inner + i];
                            gx[(o * n + j) * inner + i] += acc;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let rows = inv_std.len();
                let gv = self.value(*gain).data().to_vec();
                if self.rg(*gain) {
                    let gg = self.slot(grads, *gain);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = self.slot(grads, *bias);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = self.slot(grads, *x);
                    let mut dz = vec![0.0; d];
                    for r in 0..rows {
                        let zr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dz[j] = g[r * d + j] * gv[j];
                        }
                        let mean_dz = dz.iter().sum::<f64>() / d as f64;
                        let mean_dz_z = dz.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dz[j] - mean_dz - zr[j] * mean_dz_z);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let c = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let gl = self.slot(grads, *logits);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..c {
                            let y = if j == *t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - y);
                        }
                    }
                }
            }
            Op::BceLogits {
                logits,
                targets,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g[0] / *count as f64;
                let ld = self.value(*logits).data();
                let gl = self.slot(grads, *logits);
                for (i, t) in targets.iter().enumerate() {
                    if let Some(y) = t {
                        gl[i] += scale * (sigmoid(ld[i]) - y);
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate_unary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        let xd = self.value(x).data();
        self.add_into(grads, x, g.iter().zip(xd).map(|(&gi, &xi)| f(gi, xi, 0.0)));
    }

    fn accumulate_with_output(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        out: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        self.add_into(grads, x, g.iter().zip(out).map(|(&gi, &yi)| f(gi, 0.0, yi)));
    }

    /// Adds a full-length contribution, taking it over when the slot is empty.
    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Iterator<Item = f64>) {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib.collect()),
        }
    }

    /// Accumulates a contribution laid out like the output through `plan`.
    fn scatter(&self, grads: &mut [Option<Vec<f64>>], v: Var, plan: &Plan, contrib: impl Iterator<Item = f64>) {
        if let Plan::Same = plan {
            return self.add_into(grads, v, contrib);
        }
        let acc = self.slot(grads, v);
        for (i, c) in contrib.enumerate() {
            acc[plan.at(i)] += c;
        }
    }
}

fn zip_plans(ad: &[f64], bd: &[f64], pa: &Plan, pb: &Plan, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (pa, pb) {
        (Plan::Same, Plan::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (Plan::Same, Plan::Repeat(len)) => ad
            .chunks(*len)
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect(),
        (Plan::Same, Plan::Spread(inner)) => ad
            .chunks(*inner)
            .zip(bd)
            .flat_map(|(c, &y)| c.iter().map(move |&x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
        _ => (0..n).map(|i| f(ad[pa.at(i)], bd[pb.at(i)])).collect(),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn strided_offsets(out_shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    if total == 0 {
        return offsets;
    }
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    offsets
}

/// `c += a * b` for an `m x k` by `k x n` product with explicit (row, column)
/// strides on the operands; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand slice covers the full strided extent addressed by
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
