//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and the data its
//! backward rule needs. Nodes are only ever appended, so the node order is a
//! topological order and [`Graph::backward`] walks it in reverse.
//!
//! Gradients of leaves accumulate across repeated `backward` calls; the
//! gradients of intermediate nodes are recomputed on every call.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Border handling for same-size convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Gelu,
    Square,
    SqrtEps,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        s: f64,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Custom {
        x: Var,
        deriv: fn(f64) -> f64,
    },
    Sum {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        batch_stats: bool,
    },
    Depthwise {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        replicate: bool,
    },
    Pointwise {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    BceWithLogits {
        x: Var,
        target: Vec<f64>,
    },
    CvSquared {
        x: Var,
    },
    SelectionCv {
        x: Var,
        probs: Vec<f64>,
        dvalue_df: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (`n - 1` denominator), for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dim_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        msg: msg.into(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `E * sum(v^2) / sum(v)^2 - 1`, the squared coefficient of variation with a
/// population standard deviation, and its gradient.
pub(crate) fn cv_squared_with_grad(v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let e = v.len() as f64;
    let s: f64 = v.iter().sum();
    if v.is_empty() || s == 0.0 {
        return Err(TensorError::Contract(
            "coefficient of variation of an all-zero vector".into(),
        ));
    }
    let q: f64 = v.iter().map(|x| x * x).sum();
    let value = (e * q / (s * s) - 1.0).max(0.0);
    let grad = v
        .iter()
        .map(|&x| 2.0 * e * x / (s * s) - 2.0 * e * q / (s * s * s))
        .collect();
    Ok((value, grad))
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

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad, "leaf")
    }

    /// Registers a parameter as a leaf (once per graph). The leaf requires
    /// gradient exactly when the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable(), "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Gradients of every registered trainable parameter.
    pub fn param_grads(&self) -> Gradients {
        let mut g = Gradients::new();
        for (id, v) in &self.params {
            if let Some(grad) = &self.nodes[v.0].grad {
                g.accumulate(*id, grad);
            }
        }
        g
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            (n, 1),
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a, b },
            rg,
            "matmul",
        )
    }

    /// Batched product over a leading axis. `ta`/`tb` transpose the
    /// per-batch matrices of `a`/`b`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let batches = sa[0];
        let a_st = if ta { (1, m) } else { (k, 1) };
        let b_st = if tb { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batches * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for g in 0..batches {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ad[g * m * k..(g + 1) * m * k],
                    a_st,
                    &bd[g * k * n..(g + 1) * k * n],
                    b_st,
                    &mut out[g * m * n..(g + 1) * m * n],
                    (n, 1),
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&[batches, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
            rg,
            "bmm",
        )
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            kernels::broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let ma = kernels::broadcast_map(&out_shape, &sa);
        let mb = kernels::broadcast_map(&out_shape, &sb);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = match (&ma, &mb) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = ma.as_ref().map_or(i, |m| m[i]);
                    let ib = mb.as_ref().map_or(i, |m| m[i]);
                    f(ad[ia], bd[ib])
                })
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&out_shape, out)?,
            Op::Binary { kind, a, b },
            rg,
            name,
        )
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg, "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::MulScalar { x, s }, rg, "mul_scalar")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var, eps: f64, name: &'static str) -> Result<Var> {
        let t = match kind {
            UnaryKind::Relu => self.value(x).map(|v| v.max(0.0)),
            UnaryKind::Sigmoid => self.value(x).map(sigmoid),
            UnaryKind::Gelu => self.value(x).map(gelu),
            UnaryKind::Square => self.value(x).map(|v| v * v),
            UnaryKind::SqrtEps => {
                if eps < 0.0 {
                    return Err(TensorError::Config("sqrt_eps needs eps >= 0".into()));
                }
                self.value(x).map(|v| (v + eps).sqrt())
            }
        };
        let rg = self.rg(x);
        self.push(t, Op::Unary { kind, x }, rg, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x, 0.0, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x, 0.0, "sigmoid")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x, 0.0, "gelu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x, 0.0, "square")
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(UnaryKind::SqrtEps, x, eps, "sqrt_eps")
    }

    /// Elementwise map with a caller-supplied derivative. The derivative is
    /// trusted; the gradient checker exists to catch a wrong one.
    pub fn map_custom(&mut self, x: Var, f: fn(f64) -> f64, deriv: fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, Op::Custom { x, deriv }, rg, "custom")
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.rg(x);
        self.push(
            Tensor::new(&new_shape, out)?,
            Op::SumAxis { x, axis },
            rg,
            "sum_axis",
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| dim_err("mean_axis", "axis out of range"))?;
        if len == 0 {
            return Err(TensorError::Contract("mean over an empty axis".into()));
        }
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(s, 1.0 / len as f64)
    }

    /// Mean over the spatial axes of `[B, C, H, W]`, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(dim_err(
                "global_avg_pool",
                format!("expected [B,C,H,W], got {s:?}"),
            ));
        }
        let r = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        self.mean_axis(r, 2)
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_inner(x, None)
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true; masked-out positions are exactly zero and receive no gradient.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(dim_err("masked_softmax", "mask length differs from input"));
        }
        self.softmax_inner(x, Some(mask))
    }

    fn softmax_inner(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| dim_err("softmax", "scalar input"))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for (r, row) in d.chunks(last.max(1)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * last + j]);
            let max = (0..last)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Contract(
                    "softmax row with no selected entry".into(),
                ));
            }
            let o = &mut out[r * last..(r + 1) * last];
            let mut total = 0.0;
            for j in 0..last {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x }, rg, "softmax")
    }

    /// Layer normalization over the last axis with affine `scale`/`shift` of
    /// the last-axis length.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Config("layer_norm eps must be > 0".into()));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| dim_err("layer_norm", "scalar input"))?;
        if self.shape(scale) != [d] || self.shape(shift) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(scale)));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    fn channel_layout(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(dim_err(op, format!("expected [B, C, ...], got {s:?}")));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    /// Training-mode batch norm: per-channel statistics over batch and
    /// spatial axes of `[B, C, ...]`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        if eps <= 0.0 {
            return Err(TensorError::Config("batch_norm eps must be > 0".into()));
        }
        let (b, c, s) = self.channel_layout(x, "batch_norm")?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err("batch_norm", self.shape(x), self.shape(scale)));
        }
        let n = (b * s) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * s..(bi * c + ci + 1) * s];
                mean[ci] += plane.iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * s..(bi * c + ci + 1) * s];
                var[ci] += plane
                    .iter()
                    .map(|v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<f64>();
            }
        }
        let var_unbiased: Vec<f64> = var
            .iter()
            .map(|v| if n > 1.0 { v / (n - 1.0) } else { 0.0 })
            .collect();
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + eps).sqrt()).collect();
        let out = self.bn_apply(x, scale, shift, &mean, &rstd, true)?;
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Evaluation-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Config("batch_norm eps must be > 0".into()));
        }
        let (_, c, _) = self.channel_layout(x, "batch_norm")?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err(
                "batch_norm",
                "running statistics length differs from channels",
            ));
        }
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err("batch_norm", self.shape(x), self.shape(scale)));
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, scale, shift, mean, &rstd, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        rstd: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let (b, c, s) = self.channel_layout(x, "batch_norm")?;
        let shape = self.shape(x).to_vec();
        let xd = self.value(x).data();
        let (g, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for k in 0..s {
                    let h = (xd[base + k] - mean[ci]) * rstd[ci];
                    xhat[base + k] = h;
                    out[base + k] = h * g[ci] + sh[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                rstd: rstd.to_vec(),
                batch_stats,
            },
            rg,
            "batch_norm",
        )
    }

    // ---- convolution ------------------------------------------------------

    /// Same-size depthwise convolution of `[B, C, H, W]` with a `[C, 1, k, k]`
    /// kernel (cross-correlation, odd `k`).
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 {
            return Err(dim_err(
                "depthwise_conv",
                format!("expected [B,C,H,W], got {xs:?}"),
            ));
        }
        if ks.len() != 4 || ks[1] != 1 || ks[2] != ks[3] {
            return Err(dim_err(
                "depthwise_conv",
                format!("kernel must be [C,1,k,k], got {ks:?}"),
            ));
        }
        if ks[2].is_multiple_of(2) {
            return Err(TensorError::Unsupported(format!(
                "even kernel size {}",
                ks[2]
            )));
        }
        if ks[0] != xs[1] {
            return Err(shape_err("depthwise_conv", &xs, &ks));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [xs[1]] {
                return Err(shape_err("depthwise_conv", &xs, self.shape(bv)));
            }
        }
        let (b, c, h, w, k) = (xs[0], xs[1], xs[2], xs[3], ks[2]);
        let replicate = padding == Padding::Replicate;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * h * w;
                let o = &mut out[off..off + h * w];
                kernels::depthwise_plane(
                    &xd[off..off + h * w],
                    h,
                    w,
                    &kd[ci * k * k..(ci + 1) * k * k],
                    k,
                    replicate,
                    o,
                );
                if let Some(bd) = bd {
                    for v in o.iter_mut() {
                        *v += bd[ci];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|bv| self.rg(bv));
        self.push(
            Tensor::new(&xs, out)?,
            Op::Depthwise {
                x,
                kernel,
                bias,
                replicate,
            },
            rg,
            "depthwise_conv",
        )
    }

    /// 1×1 convolution: `[B, Cin, H, W]` with weight `[Cout, Cin, 1, 1]`.
    pub fn pointwise_conv(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(dim_err(
                "pointwise_conv",
                format!("expected [B,C,H,W], got {xs:?}"),
            ));
        }
        if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 || ws[1] != xs[1] {
            return Err(shape_err("pointwise_conv", &xs, &ws));
        }
        let (b, cin, hw, cout) = (xs[0], xs[1], xs[2] * xs[3], ws[0]);
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(shape_err("pointwise_conv", &ws, self.shape(bv)));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; b * cout * hw];
        for bi in 0..b {
            kernels::gemm(
                cout,
                cin,
                hw,
                wd,
                (cin, 1),
                &xd[bi * cin * hw..(bi + 1) * cin * hw],
                (hw, 1),
                &mut out[bi * cout * hw..(bi + 1) * cout * hw],
                (hw, 1),
                0.0,
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for bi in 0..b {
                for co in 0..cout {
                    for v in &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw] {
                        *v += bd[co];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        self.push(
            Tensor::new(&[b, cout, xs[2], xs[3]], out)?,
            Op::Pointwise { x, weight, bias },
            rg,
            "pointwise_conv",
        )
    }

    /// Bilinear upsampling of `[B, C, H, W]` by an integer factor with
    /// half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || factor == 0 || xs[2] == 0 || xs[3] == 0 {
            return Err(dim_err(
                "upsample",
                format!("bad input {xs:?} / factor {factor}"),
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(h, factor);
        let tx = kernels::bilinear_taps(w, factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[i * ow + j] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[b, c, oh, ow], out)?,
            Op::Upsample { x, factor },
            rg,
            "upsample",
        )
    }

    // ---- layout -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg, "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", shape.len()),
            ));
        }
        let (data, new_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        self.push(
            Tensor::new(&new_shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
            "permute",
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| dim_err("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", "axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err(
                "slice",
                format!(
                    "[{start}, {}) out of range on axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut ns = shape;
        ns[axis] = len;
        let rg = self.rg(x);
        self.push(
            Tensor::new(&ns, out)?,
            Op::Slice { x, axis, start },
            rg,
            "slice",
        )
    }

    /// Rows of a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err("embedding", "table must be 2-D"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(dim_err(
                "embedding",
                format!("id {bad} outside vocabulary of {}", s[0]),
            ));
        }
        let d = s[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    // ---- losses -------------------------------------------------------------

    /// Mean binary cross-entropy of logits `x` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(shape_err("bce_with_logits", self.shape(x), target.shape()));
        }
        let xd = self.value(x).data();
        let n = xd.len() as f64;
        let total: f64 = xd
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                x,
                target: target.data().to_vec(),
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Squared coefficient of variation of a vector (population std).
    pub fn cv_squared(&mut self, x: Var) -> Result<Var> {
        let (v, _) = cv_squared_with_grad(self.value(x).data())?;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::CvSquared { x }, rg, "cv_squared")
    }

    /// Squared coefficient of variation of per-column selection frequencies
    /// of a `[B, E]` boolean `selected` mask. The value is exact; the
    /// gradient with respect to the logits `x` is a straight-through
    /// estimate that substitutes the batch-mean dense softmax of `x` for the
    /// non-differentiable frequencies.
    pub fn selection_cv_squared(&mut self, x: Var, selected: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || selected.len() != s[0] * s[1] || s[0] == 0 {
            return Err(dim_err(
                "selection_cv_squared",
                "expected [B, E] logits and mask",
            ));
        }
        let (b, e) = (s[0], s[1]);
        let mut freq = vec![0.0; e];
        for bi in 0..b {
            for i in 0..e {
                if selected[bi * e + i] {
                    freq[i] += 1.0 / b as f64;
                }
            }
        }
        let (value, dvalue_df) = cv_squared_with_grad(&freq)?;
        let xd = self.value(x).data();
        let mut probs = vec![0.0; b * e];
        for bi in 0..b {
            let row = &xd[bi * e..(bi + 1) * e];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tot: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for i in 0..e {
                probs[bi * e + i] = (row[i] - m).exp() / tot;
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(value),
            Op::SelectionCv {
                x,
                probs,
                dvalue_df,
            },
            rg,
            "selection_cv_squared",
        )
    }

    // ---- backward -------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating into every leaf that
    /// requires gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &gy);
            self.nodes[i].grad = Some(gy);
            for (v, g) in contributions {
                self.accumulate(v, &g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => add_into(acc, g),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn node_backward(&self, i: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        gy,
                        (n, 1),
                        self.value(*b).data(),
                        (1, n),
                        &mut da,
                        (k, 1),
                        0.0,
                    );
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k),
                        gy,
                        (n, 1),
                        &mut db,
                        (n, 1),
                        0.0,
                    );
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let batches = sa[0];
                let a_st = if *ta { (1, m) } else { (k, 1) };
                let b_st = if *tb { (1, k) } else { (n, 1) };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![0.0; batches * m * k];
                    for g in 0..batches {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &gy[g * m * n..(g + 1) * m * n],
                            (n, 1),
                            &bd[g * k * n..(g + 1) * k * n],
                            (b_st.1, b_st.0),
                            &mut da[g * m * k..(g + 1) * m * k],
                            a_st,
                            0.0,
                        );
                    }
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; batches * k * n];
                    for g in 0..batches {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &ad[g * m * k..(g + 1) * m * k],
                            (a_st.1, a_st.0),
                            &gy[g * m * n..(g + 1) * m * n],
                            (n, 1),
                            &mut db[g * k * n..(g + 1) * k * n],
                            b_st,
                            0.0,
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let ma = kernels::broadcast_map(out_shape, self.shape(*a));
                let mb = kernels::broadcast_map(out_shape, self.shape(*b));
                let ia = |j: usize| ma.as_ref().map_or(j, |m| m[j]);
                let ib = |j: usize| mb.as_ref().map_or(j, |m| m[j]);
                if self.rg(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for (j, &g) in gy.iter().enumerate() {
                        da[ia(j)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g,
                            BinaryKind::Mul => g * bd[ib(j)],
                            BinaryKind::Div => g / bd[ib(j)],
                        };
                    }
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for (j, &g) in gy.iter().enumerate() {
                        let y = bd[ib(j)];
                        db[ib(j)] += match kind {
                            BinaryKind::Add => g,
                            BinaryKind::Sub => -g,
                            BinaryKind::Mul => g * ad[ia(j)],
                            BinaryKind::Div => -g * ad[ia(j)] / (y * y),
                        };
                    }
                    out.push((*b, db));
                }
            }
            Op::AddScalar { x } => out.push((*x, gy.to_vec())),
            Op::MulScalar { x, s } => out.push((*x, gy.iter().map(|g| g * s).collect())),
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let dx = gy
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(&g, (&xv, &yv))| {
                        g * match kind {
                            UnaryKind::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => yv * (1.0 - yv),
                            UnaryKind::Gelu => gelu_deriv(xv),
                            UnaryKind::Square => 2.0 * xv,
                            UnaryKind::SqrtEps => 0.5 / yv,
                        }
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Custom { x, deriv } => {
                let xd = self.value(*x).data();
                out.push((*x, gy.iter().zip(xd).map(|(g, &v)| g * deriv(v)).collect()));
            }
            Op::Sum { x } => out.push((*x, vec![gy[0]; self.value(*x).len()])),
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        dx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&gy[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, dx));
            }
            Op::Softmax { x } => {
                let last = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / last.max(1) {
                    let (ys, gs) = (&y[r * last..(r + 1) * last], &gy[r * last..(r + 1) * last]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..last {
                        dx[r * last + j] = ys[j] * (gs[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            } => {
                let d = self.value(*scale).len();
                let g = self.value(*scale).data();
                let rows = xhat.len() / d;
                if self.rg(*scale) || self.rg(*shift) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gy[r * d + j] * xhat[r * d + j];
                            db[j] += gy[r * d + j];
                        }
                    }
                    out.push((*scale, dg));
                    out.push((*shift, db));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gy[r * d + j] * g[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gy[r * d + j] * g[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (b, c, sp) = (s[0], s[1], s[2..].iter().product::<usize>());
                let g = self.value(*scale).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * sp;
                        for k in 0..sp {
                            dg[ci] += gy[base + k] * xhat[base + k];
                            db[ci] += gy[base + k];
                        }
                    }
                }
                if self.rg(*x) {
                    let n = (b * sp) as f64;
                    let mut dx = vec![0.0; xhat.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * sp;
                            for k in 0..sp {
                                let dh = gy[base + k] * g[ci];
                                dx[base + k] = if *batch_stats {
                                    // mean(dh) = g*db/n and mean(dh*xhat) = g*dg/n per channel
                                    rstd[ci]
                                        * (dh
                                            - g[ci] * db[ci] / n
                                            - xhat[base + k] * g[ci] * dg[ci] / n)
                                } else {
                                    rstd[ci] * dh
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*scale, dg));
                out.push((*shift, db));
            }
            Op::Depthwise {
                x,
                kernel,
                bias,
                replicate,
            } => {
                let s = self.shape(*x);
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let k = self.shape(*kernel)[2];
                let xd = self.value(*x).data();
                let kd = self.value(*kernel).data();
                let want_x = self.rg(*x);
                let want_k = self.rg(*kernel);
                let mut dx = if want_x {
                    vec![0.0; xd.len()]
                } else {
                    Vec::new()
                };
                let mut dk = if want_k {
                    vec![0.0; kd.len()]
                } else {
                    Vec::new()
                };
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * h * w;
                        kernels::depthwise_plane_backward(
                            &xd[off..off + h * w],
                            h,
                            w,
                            &kd[ci * k * k..(ci + 1) * k * k],
                            k,
                            *replicate,
                            &gy[off..off + h * w],
                            want_x.then(|| &mut dx[off..off + h * w]),
                            want_k.then(|| &mut dk[ci * k * k..(ci + 1) * k * k]),
                        );
                    }
                }
                if want_x {
                    out.push((*x, dx));
                }
                if want_k {
                    out.push((*kernel, dk));
                }
                if let Some(bv) = bias {
                    let mut dbias = vec![0.0; c];
                    for bi in 0..b {
                        for (ci, d) in dbias.iter_mut().enumerate() {
                            let off = (bi * c + ci) * h * w;
                            *d += gy[off..off + h * w].iter().sum::<f64>();
                        }
                    }
                    out.push((*bv, dbias));
                }
            }
            Op::Pointwise { x, weight, bias } => {
                let s = self.shape(*x);
                let (b, cin, hw) = (s[0], s[1], s[2] * s[3]);
                let cout = self.shape(*weight)[0];
                let xd = self.value(*x).data();
                let wd = self.value(*weight).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        kernels::gemm(
                            cin,
                            cout,
                            hw,
                            wd,
                            (1, cin),
                            &gy[bi * cout * hw..(bi + 1) * cout * hw],
                            (hw, 1),
                            &mut dx[bi * cin * hw..(bi + 1) * cin * hw],
                            (hw, 1),
                            0.0,
                        );
                    }
                    out.push((*x, dx));
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; cout * cin];
                    for bi in 0..b {
                        kernels::gemm(
                            cout,
                            hw,
                            cin,
                            &gy[bi * cout * hw..(bi + 1) * cout * hw],
                            (hw, 1),
                            &xd[bi * cin * hw..(bi + 1) * cin * hw],
                            (1, hw),
                            &mut dw,
                            (cin, 1),
                            1.0,
                        );
                    }
                    out.push((*weight, dw));
                }
                if let Some(bv) = bias {
                    let mut dbias = vec![0.0; cout];
                    for bi in 0..b {
                        for (co, d) in dbias.iter_mut().enumerate() {
                            *d += gy[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    out.push((*bv, dbias));
                }
            }
            Op::Reshape { x } => out.push((*x, gy.to_vec())),
            Op::Permute { x, perm } => {
                let (dx, _) =
                    kernels::permute(gy, node.value.shape(), &kernels::inverse_perm(perm));
                out.push((*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dv.extend_from_slice(&gy[o * total + offset..o * total + offset + len]);
                        }
                        out.push((v, dv));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let ty = kernels::bilinear_taps(h, *factor);
                let tx = kernels::bilinear_taps(w, *factor);
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let g = &gy[p * oh * ow..(p + 1) * oh * ow];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let v = g[i * ow + j];
                            d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                            d[y0 * w + x1] += v * (1.0 - fy) * fx;
                            d[y1 * w + x0] += v * fy * (1.0 - fx);
                            d[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![0.0; s[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &gy[r * d..(r + 1) * d]);
                }
                out.push((*table, dt));
            }
            Op::BceWithLogits { x, target } => {
                let xd = self.value(*x).data();
                let n = xd.len() as f64;
                let dx = xd
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| gy[0] * (sigmoid(z) - t) / n)
                    .collect();
                out.push((*x, dx));
            }
            Op::CvSquared { x } => {
                if let Ok((_, grad)) = cv_squared_with_grad(self.value(*x).data()) {
                    out.push((*x, grad.into_iter().map(|v| v * gy[0]).collect()));
                }
            }
            Op::SelectionCv {
                x,
                probs,
                dvalue_df,
            } => {
                let s = self.shape(*x);
                let (b, e) = (s[0], s[1]);
                let mut dx = vec![0.0; b * e];
                for bi in 0..b {
                    let p = &probs[bi * e..(bi + 1) * e];
                    let dot: f64 = p.iter().zip(dvalue_df).map(|(a, c)| a * c).sum();
                    for i in 0..e {
                        dx[bi * e + i] = gy[0] * p[i] * (dvalue_df[i] - dot) / b as f64;
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }
}
