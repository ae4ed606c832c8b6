//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node appended to a tape.
//! Parents always precede children, so walking the tape backwards from
//! the loss is a valid reverse topological order and visits each node
//! once. Only the operations the prompt translator, the frozen text head
//! and the classification loss need are provided.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Epsilon used by the translator's layer norms.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Norm floor used by [`Graph::l2_normalize`].
pub const L2_EPS: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Geglu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Recording tape. Build a fresh graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite("operation output")?;
        self.nodes.push(Node { value, op, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input. Gradients may still be read for it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("constant")?;
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to parameter `name` of `params`.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let value = params.value(name)?.clone();
        value.check_finite(name)?;
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix(self.value(a), "matmul")?;
        let (k2, n) = require_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = require_matrix(self.value(a), "transpose")?;
        let out = transpose_raw(self.value(a).data(), r, c);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    /// Gated GELU: first half of the last dimension is the value, the
    /// second half is the gate; returns `value ⊙ gelu(gate)`.
    pub fn geglu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        if !n.is_multiple_of(2) {
            return Err(Error::dim(format!("geglu needs an even last dimension, got {n}")));
        }
        let h = n / 2;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let mut data = Vec::with_capacity(x.len() / 2);
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            for j in 0..h {
                data.push(row[j] * gelu_scalar(row[h + j]));
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Geglu(a))
    }

    /// Row softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        if n == 0 {
            return Err(Error::dim("softmax over an empty dimension"));
        }
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            data.extend(softmax_row(x.row_slice(r)));
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(a))
    }

    /// Per-row normalization over the last dimension followed by the
    /// affine map `gain·x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let t = self.value(x);
        let d = t.last_dim();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = self.value(v).shape();
            let len: usize = s.iter().product();
            if len != d || s.iter().filter(|&&e| e != 1).count() > 1 {
                return Err(Error::dim(format!("layer_norm {name} shape {s:?} does not match last dim {d}")));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..rows {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise `x / max(‖x‖₂, eps)` over the last dimension.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract("l2_normalize eps must be positive"));
        }
        let t = self.value(x);
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let denom = n.max(eps);
            data.extend(row.iter().map(|v| v / denom));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::L2Normalize { x, norms, eps })
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = require_matrix(t, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} logit rows", labels.len())));
        }
        if b == 0 {
            return Err(Error::contract("cross_entropy over an empty batch"));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Index(format!("label {l} in row {row} is outside [0, {c})")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(loss / b as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = require_matrix(self.value(x), "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::dim(format!("column range {start}..{end} invalid for {c} columns")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        self.push(Tensor::new(vec![r, end - start], data)?, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols of nothing"));
        }
        let (rows, _) = require_matrix(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_matrix(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols row mismatch: {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows of nothing"));
        }
        let (_, cols) = require_matrix(self.value(parts[0]), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = require_matrix(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows column mismatch: {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean over the rows of a matrix, as a `[1 × cols]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = require_matrix(self.value(x), "mean_rows")?;
        if r == 0 {
            return Err(Error::dim("mean over zero rows"));
        }
        let t = self.value(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and overwrites the gradient of every
    /// parameter in `params`. Parameters the loss does not reach get zeros.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        let grads = self.backward(loss)?;
        let mut fresh: std::collections::BTreeMap<String, Tensor> = Default::default();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let (Some(name), Some(g)) = (&node.param, grads.get(Var(i))) else {
                continue;
            };
            match fresh.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    fresh.insert(name.clone(), g.clone());
                }
            }
        }
        for (name, p) in params.iter_mut() {
            let g = fresh
                .remove(name)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            p.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let bt = transpose_raw(bv.data(), k, n);
                let ga = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose_raw(av.data(), m, k);
                let gb = matmul_raw(&at, g.data(), k, m, n);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                accumulate(grads, *a, Tensor::new(vec![c, r], transpose_raw(g.data(), r, c))?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, bv, |x, y| x * y);
                let gb = zip_map(g, av, |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_map(g, x, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Geglu(a) => {
                let x = self.value(*a);
                let h = x.last_dim() / 2;
                let mut gx = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let row = x.row_slice(r);
                    let grow = &g.data()[r * h..(r + 1) * h];
                    let out = &mut gx[r * 2 * h..(r + 1) * 2 * h];
                    for j in 0..h {
                        let (val, gate) = (row[j], row[h + j]);
                        out[j] = grow[j] * gelu_scalar(gate);
                        out[h + j] = grow[j] * val * gelu_grad(gate);
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let gain_v = self.value(*gain).data();
                let mut gx = vec![0.0; xv.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..xv.rows() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        gx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                let gs = self.value(*gain).shape().to_vec();
                let bs = self.value(*bias).shape().to_vec();
                accumulate(grads, *gain, Tensor::new(gs, ggain)?);
                accumulate(grads, *bias, Tensor::new(bs, gbias)?);
            }
            Op::L2Normalize { x, norms, eps } => {
                let xv = self.value(*x);
                let y = &node.value;
                let d = xv.last_dim();
                let mut gx = vec![0.0; xv.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let out = &mut gx[r * d..(r + 1) * d];
                    if n > *eps {
                        let yr = y.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            out[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..d {
                            out[j] = gr[j] / eps;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.shape()[1];
                let b = labels.len() as f64;
                let up = g.data()[0];
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= 1.0;
                }
                for v in &mut gl {
                    *v *= up / b;
                }
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), gl)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let w = g.shape()[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], gx)?);
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut gp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(vec![rows, w], gp)?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    accumulate(grads, p, Tensor::new(shape, g.data()[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let r = xv.shape()[0];
                let row: Vec<f64> = g.data().iter().map(|v| v / r as f64).collect();
                let data = (0..r).flat_map(|_| row.iter().copied()).collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked on the forward pass")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Maximum relative error between the analytic gradient of `f` and
/// central differences with step `h`, over every coordinate of `params`.
///
/// `f` must build its own graph and return the scalar loss value plus,
/// when `with_grads` is set, the analytic gradients written into the set.
/// The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &ParameterSet, h: f64) -> Result<f64>
where
    F: FnMut(&mut ParameterSet, bool) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let mut analytic = params.clone();
    let base = f(&mut analytic, true)?;
    if !base.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for name in &names {
        let grad = analytic
            .get(name)?
            .grad
            .clone()
            .ok_or_else(|| Error::contract(format!("no analytic gradient for `{name}`")))?;
        for idx in 0..grad.len() {
            let orig = probe.value(name)?.data()[idx];
            probe.get_mut(name)?.value.data_mut()[idx] = orig + h;
            let plus = f(&mut probe, false)?;
            probe.get_mut(name)?.value.data_mut()[idx] = orig - h;
            let minus = f(&mut probe, false)?;
            probe.get_mut(name)?.value.data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite value probing `{name}`[{idx}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
