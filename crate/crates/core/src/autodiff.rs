//! Tape-based reverse-mode differentiation over a small closed operator set.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it once in reverse.

use std::ops::Index;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{axis_layout, gemm_nn, gemm_nt, gemm_tn, matmul_dims, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize(Var, usize, f64),
    Gelu(Var),
    LayerNorm(Var, Var, Var, f64),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Gather(Var, Arc<Vec<usize>>),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    matmul_flops: u64,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

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

    /// Multiply-accumulate FLOPs (2 per MAC) spent in forward matmuls.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.leaf_shared(Arc::new(t))
    }

    pub fn leaf_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::usage(format!("var {} not recorded in this graph", v.0)))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (r, s, t) = matmul_dims(self.value(a), self.value(b))?;
        let mut out = vec![0.0; r * t];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, r, s, t);
        self.matmul_flops += 2 * (r * s * t) as u64;
        self.push(Tensor::new(vec![r, t], out)?, Op::MatMul(a, b), "matmul")
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), "add")
    }

    /// `x[r×c] + bias[1×c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let xv = self.value(x);
        let bv = self.value(bias);
        if !xv.is_matrix() || bv.dims() != [1, xv.cols()] {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                xv.dims(),
                bv.dims()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, w) in out.data_mut().iter_mut().zip(bv) {
            *o *= w;
        }
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Scales row `i` of `x[r×c]` by `v[i]`, where `v` is `r×1`.
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check(x)?;
        self.check(v)?;
        let xv = self.value(x);
        let vv = self.value(v);
        if !xv.is_matrix() || vv.dims() != [xv.rows(), 1] {
            return Err(Error::shape(format!(
                "scale_rows: {:?} by {:?}",
                xv.dims(),
                vv.dims()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vv.data()[i / c];
        }
        self.push(out, Op::ScaleRows(x, v), "scale_rows")
    }

    /// Multiplies every entry of `x` by the single entry of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar: scalar operand must hold one value"));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        self.push(out, Op::MulScalar(x, s), "mul_scalar")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        xv.ensure_finite("softmax input")?;
        let out = softmax_forward(xv, axis)?;
        self.push(out, Op::Softmax(x, axis), "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        xv.ensure_finite("log_softmax input")?;
        let (outer, len, inner) = axis_layout(xv.dims(), axis)?;
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (d[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    d[at(k)] -= lse;
                }
            }
        }
        self.push(out, Op::LogSoftmax(x, axis), "log_softmax")
    }

    /// Scales each slice along `axis` by `1 / (‖slice‖₂ + eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check(x)?;
        let out = l2_normalize_forward(self.value(x), axis, eps)?;
        self.push(out, Op::L2Normalize(x, axis, eps), "l2_normalize")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), "gelu")
    }

    /// Layer normalization over the last axis of a matrix with learnable
    /// `gain[1×c]` and `bias[1×c]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let xv = self.value(x);
        let c = xv.cols();
        if !xv.is_matrix() || self.dims(gain) != [1, c] || self.dims(bias) != [1, c] {
            return Err(Error::shape("layer_norm: gain and bias must be 1×cols"));
        }
        let (xhat, _) = layer_norm_stats(xv, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * g[i % c] + b[i % c];
        }
        self.push(out, Op::LayerNorm(x, gain, bias, eps), "layer_norm")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshaped(dims)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x), "transpose")
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_layout(xv.dims(), axis)?;
        let mut dims = xv.dims().to_vec();
        dims[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[o * len * inner + k * inner + i];
                }
            }
        }
        self.push(Tensor::new(dims, out)?, Op::SumAxis(x, axis), "sum_axis")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self
            .dims(x)
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape("mean_axis: axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Picks flat elements of `x` by index into a tensor of shape `dims`.
    pub fn gather(&mut self, x: Var, indices: Arc<Vec<usize>>, dims: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.numel()) {
            return Err(Error::shape(format!("gather index {bad} out of range")));
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(dims.to_vec(), data)?;
        self.push(out, Op::Gather(x, indices), "gather")
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(Error::shape("gather_rows needs a matrix"));
        }
        if rows.is_empty() {
            return Err(Error::shape("gather_rows needs at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::shape(format!("gather_rows index {bad} out of range")));
        }
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows.iter() {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), xv.cols()], data)?;
        self.push(out, Op::GatherRows(x, rows), "gather_rows")
    }

    /// Adds row `k` of `x` into row `rows[k]` of a zero `total_rows×c` matrix.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        rows: Arc<Vec<usize>>,
        total_rows: usize,
    ) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if !xv.is_matrix() || xv.rows() != rows.len() {
            return Err(Error::shape("scatter_add_rows: one target row per input row"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= total_rows) {
            return Err(Error::shape(format!("scatter row {bad} out of range")));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(&[total_rows, c]);
        for (k, &r) in rows.iter().enumerate() {
            for (o, v) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(xv.row(k)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAddRows(x, rows), "scatter_add_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows needs at least one part"))?;
        for &p in parts {
            self.check(p)?;
        }
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.cols() != c {
                return Err(Error::shape("concat_rows: column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Reverse pass from a single-valued `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let seed = Tensor::filled(self.dims(loss), 1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.dims() != self.dims(output) {
            return Err(Error::shape("backward seed must match output dims"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (r, s, t) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![0.0; r * s];
                gemm_nt(g.data(), bv.data(), &mut ga, r, t, s);
                accumulate(grads, *a, Tensor::new(vec![r, s], ga)?);
                let mut gb = vec![0.0; s * t];
                gemm_tn(av.data(), g.data(), &mut gb, s, r, t);
                accumulate(grads, *b, Tensor::new(vec![s, t], gb)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g.clone());
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                accumulate(grads, *bias, Tensor::new(vec![1, c], gb)?);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = zip_map(g, bv, |gi, bi| gi * bi);
                let gb = zip_map(g, av, |gi, ai| gi * ai);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ScaleRows(x, v) => {
                let xv = self.value(*x);
                let vv = self.value(*v);
                let c = xv.cols();
                let mut gx = g.clone();
                for (i, e) in gx.data_mut().iter_mut().enumerate() {
                    *e *= vv.data()[i / c];
                }
                let mut gv = vec![0.0; xv.rows()];
                for (i, (gi, xi)) in g.data().iter().zip(xv.data()).enumerate() {
                    gv[i / c] += gi * xi;
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *v, Tensor::new(vec![xv.rows(), 1], gv)?);
            }
            Op::MulScalar(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let scale = sv.item();
                accumulate(grads, *x, g.map(|v| v * scale));
                let gs: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                accumulate(grads, *s, Tensor::filled(sv.dims(), gs));
            }
            Op::Scale(x, factor) => accumulate(grads, *x, g.map(|v| v * factor)),
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_layout(y.dims(), *axis)?;
                let mut gx = Tensor::zeros(y.dims());
                let (yd, gd) = (y.data(), g.data());
                let out = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = axis_layout(y.dims(), *axis)?;
                let mut gx = Tensor::zeros(y.dims());
                let (yd, gd) = (y.data(), g.data());
                let out = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let total: f64 = (0..len).map(|k| gd[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = gd[at(k)] - yd[at(k)].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::L2Normalize(x, axis, eps) => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_layout(xv.dims(), *axis)?;
                let mut gx = Tensor::zeros(xv.dims());
                let (xd, gd) = (xv.data(), g.data());
                let out = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let norm = (0..len).map(|k| xd[at(k)].powi(2)).sum::<f64>().sqrt();
                        let denom = norm + eps;
                        // d/dx [x / (‖x‖ + eps)] = I/denom - x xᵀ / (‖x‖ denom²)
                        let coupling = if norm > 0.0 {
                            let dot: f64 = (0..len).map(|k| gd[at(k)] * xd[at(k)]).sum();
                            dot / (norm * denom * denom)
                        } else {
                            0.0
                        };
                        for k in 0..len {
                            out[at(k)] = gd[at(k)] / denom - xd[at(k)] * coupling;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = zip_map(g, self.value(*x), |gi, xi| gi * gelu_grad(xi));
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm(x, gain, bias, eps) => {
                let xv = self.value(*x);
                let gamma = self.value(*gain).data();
                let (r, c) = (xv.rows(), xv.cols());
                let (xhat, inv_std) = layer_norm_stats(xv, *eps);
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let xr = &xhat.data()[i * c..(i + 1) * c];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..c {
                        ggain[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                        let gh = gr[j] * gamma[j];
                        mean_gh += gh;
                        mean_ghx += gh * xr[j];
                    }
                    mean_gh /= c as f64;
                    mean_ghx /= c as f64;
                    for j in 0..c {
                        let gh = gr[j] * gamma[j];
                        gx[i * c + j] = inv_std[i] * (gh - mean_gh - xr[j] * mean_ghx);
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], gx)?);
                accumulate(grads, *gain, Tensor::new(vec![1, c], ggain)?);
                accumulate(grads, *bias, Tensor::new(vec![1, c], gbias)?);
            }
            Op::Reshape(x) => {
                let gx = g.reshaped(self.dims(*x))?;
                accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()?),
            Op::SumAll(x) => {
                accumulate(grads, *x, Tensor::filled(self.dims(*x), g.item()));
            }
            Op::SumAxis(x, axis) => {
                let dims = self.dims(*x);
                let (outer, len, inner) = axis_layout(dims, *axis)?;
                let mut gx = Tensor::zeros(dims);
                let out = gx.data_mut();
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            out[o * len * inner + k * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather(x, indices) => {
                let gx = grad_buffer(grads, *x, self.dims(*x)).data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    gx[i] += g.data()[k];
                }
            }
            Op::GatherRows(x, rows) => {
                let c = self.dims(*x)[1];
                let gx = grad_buffer(grads, *x, self.dims(*x)).data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (o, v) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            Op::ScatterAddRows(x, rows) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(rows.len() * c);
                for &r in rows.iter() {
                    data.extend_from_slice(g.row(r));
                }
                accumulate(grads, *x, Tensor::new(vec![rows.len(), c], data)?);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for p in parts {
                    let rows = self.dims(*p)[0];
                    let slice = g.data()[start * c..(start + rows) * c].to_vec();
                    accumulate(grads, *p, Tensor::new(vec![rows, c], slice)?);
                    start += rows;
                }
            }
        }
        Ok(())
    }
}

/// The gradient slot of `v`, zero-filled on first use; sparse ops add
/// into it directly.
fn grad_buffer<'a>(grads: &'a mut [Option<Tensor>], v: Var, dims: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(dims))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (o, &w) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, w);
    }
    out
}

pub(crate) fn softmax_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(x.dims(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (d[at(k)] - max).exp();
                d[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                d[at(k)] /= total;
            }
        }
    }
    Ok(out)
}

pub(crate) fn l2_normalize_forward(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(x.dims(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let norm = (0..len).map(|k| d[at(k)].powi(2)).sum::<f64>().sqrt();
            let inv = 1.0 / (norm + eps);
            for k in 0..len {
                d[at(k)] *= inv;
            }
        }
    }
    Ok(out)
}

/// Returns the normalized matrix and per-row `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_stats(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    let mut inv_stds = Vec::with_capacity(r);
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv_stds.push(inv_std);
    }
    (out, inv_stds)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Result of a reverse pass: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.dims(v)))
    }
}

/// Handle to a named trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters.
///
/// Values are reference counted so binding them into a graph is cheap.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name since that is a
    /// construction bug, not a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.dims() != self.values[id.0].dims() {
            return Err(Error::shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].dims(),
                value.dims()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Inserts every parameter as a graph leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bindings {
        Bindings(
            self.values
                .iter()
                .map(|v| graph.leaf_shared(Arc::clone(v)))
                .collect(),
        )
    }
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
