//! Parameterised building blocks shared by every model component.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamKind, ParamStore};

/// Initialisation of a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zeros,
}

/// Affine map over the last axis: `x · W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = match init {
            Init::FanIn => {
                store.uniform_fan_in(&wname, &[in_dim, out_dim], in_dim, ParamKind::Weight)?
            }
            Init::Zeros => store.zeros(&wname, &[in_dim, out_dim], ParamKind::Weight)?,
        };
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[out_dim], ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Applies the map to any tensor whose last axis is `in_dim`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, self.in_dim])?
        };
        let w = g.param(store, self.weight)?;
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b)?;
            y = g.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

/// Layer-norm affine parameters (scale 1, shift 0 at init).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: store.ones(&format!("{name}.scale"), &[dim], ParamKind::NormScale)?,
            shift: store.zeros(&format!("{name}.shift"), &[dim], ParamKind::NormShift)?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.param(store, self.scale)?;
        let b = g.param(store, self.shift)?;
        g.layer_norm(x, s, b, self.eps)
    }
}

/// Scaled dot-product multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// `zero_output` zero-initialises the output projection so the block is a
    /// no-op inside a residual at construction.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        zero_output: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let out_init = if zero_output {
            Init::Zeros
        } else {
            Init::FanIn
        };
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, Init::FanIn)?,
            key: Linear::new(
                store,
                &format!("{name}.key"),
                kv_dim,
                dim,
                true,
                Init::FanIn,
            )?,
            value: Linear::new(
                store,
                &format!("{name}.value"),
                kv_dim,
                dim,
                true,
                Init::FanIn,
            )?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, out_init)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let r = g.reshape(x, &[b, t, self.heads, dh])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[b * self.heads, t, dh])
    }

    /// `q: [B, Tq, dim]`, `kv: [B, Tk, kv_dim]` -> `[B, Tq, dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        let (qs, ks) = (g.shape(q).to_vec(), g.shape(kv).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let (b, tq) = (qs[0], qs[1]);
        let dh = self.dim / self.heads;
        let qp = self.query.forward(g, store, q)?;
        let kp = self.key.forward(g, store, kv)?;
        let vp = self.value.forward(g, store, kv)?;
        let qh = self.split_heads(g, qp)?;
        let kh = self.split_heads(g, kp)?;
        let vh = self.split_heads(g, vp)?;
        let scores = g.bmm(qh, kh, false, true)?;
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.bmm(attn, vh, false, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, self.dim])?;
        self.output.forward(g, store, ctx)
    }
}
