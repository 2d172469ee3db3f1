//! The four fusion experts. Each returns a residual increment `Δ` with
//! `expert(x) = x + Δ(x)`; with the default zero-initialised output layers
//! every `Δ` is exactly zero at construction.

use sera_tensor::{
    Graph, Init, LayerNorm, Linear, MultiHeadAttention, Padding, ParamId, ParamKind, ParamStore,
    Tensor, Var,
};

use crate::context::ForwardCtx;
use crate::error::{CoreError, Result};
use crate::norm::BatchNorm2d;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
pub const LAPLACE: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
pub const BLUR: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];
/// Stabiliser inside the gradient-magnitude square root.
pub const MAGNITUDE_EPS: f64 = 1e-6;

/// Registers a fixed 3×3 filter replicated over `channels` as a depthwise kernel.
pub fn fixed_kernel(
    store: &mut ParamStore,
    name: &str,
    channels: usize,
    taps: &[f64; 9],
) -> Result<ParamId> {
    let t = Tensor::from_fn(&[channels, 1, 3, 3], |i| taps[i % 9]);
    Ok(store.add(name, ParamKind::FixedKernel, t)?)
}

/// Normalised coordinates `[B, 2, H, W]`: channel 0 is x (column), channel 1
/// is y (row), both linear in the pixel index with the borders at ±1.
pub fn coord_grid(batch: usize, h: usize, w: usize) -> Tensor {
    let norm = |i: usize, n: usize| {
        if n > 1 {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    Tensor::from_fn(&[batch, 2, h, w], |idx| {
        let plane = idx / (h * w);
        let (i, j) = ((idx % (h * w)) / w, idx % w);
        if plane.is_multiple_of(2) {
            norm(j, w)
        } else {
            norm(i, h)
        }
    })
}

fn grid_dims(g: &Graph, x: Var, op: &str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(CoreError::Contract(format!(
            "{op} expects [B, C, H, W], got {s:?}"
        ))),
    }
}

/// `[B, C, H, W]` -> `[B, H·W, C]` with token `t` at row `t / W`, column `t % W`.
pub fn grid_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let [b, c, h, w] = grid_dims(g, x, "grid_to_tokens")?;
    let r = g.reshape(x, &[b, c, h * w])?;
    Ok(g.permute(r, &[0, 2, 1])?)
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(CoreError::Contract(format!(
            "{} tokens do not form a {h}x{w} grid",
            s.get(1).copied().unwrap_or(0)
        )));
    }
    let p = g.permute(t, &[0, 2, 1])?;
    Ok(g.reshape(p, &[s[0], s[2], h, w])?)
}

/// Adds `α · Conv1x1(coordinates)`.
#[derive(Clone, Debug)]
pub struct SpatialExpert {
    pub proj: ParamId,
    pub alpha: f64,
}

impl SpatialExpert {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            proj: store.zeros(
                &format!("{name}.proj"),
                &[channels, 2, 1, 1],
                ParamKind::Weight,
            )?,
            alpha,
        })
    }

    pub fn delta(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [b, _, h, w] = grid_dims(g, x, "spatial expert")?;
        let coords = g.constant(coord_grid(b, h, w))?;
        let p = g.param(store, self.proj)?;
        let y = g.pointwise_conv(coords, p, None)?;
        Ok(g.mul_scalar(y, self.alpha)?)
    }
}

/// Pre-norm self-attention and feed-forward over the flattened grid.
#[derive(Clone, Debug)]
pub struct ContextExpert {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl ContextExpert {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        expansion: usize,
    ) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                channels,
                channels,
                heads,
                true,
            )
            .map_err(|e| CoreError::Config(e.to_string()))?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            ffn_in: Linear::new(
                store,
                &format!("{name}.ffn_in"),
                channels,
                hidden,
                true,
                Init::FanIn,
            )?,
            ffn_out: Linear::new(
                store,
                &format!("{name}.ffn_out"),
                hidden,
                channels,
                true,
                Init::Zeros,
            )?,
        })
    }

    pub fn delta(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [_, _, h, w] = grid_dims(g, x, "context expert")?;
        let t = grid_to_tokens(g, x)?;
        let n1 = self.norm1.forward(g, store, t)?;
        let a = self.attn.forward(g, store, n1, n1)?;
        let z1 = g.add(t, a)?;
        let n2 = self.norm2.forward(g, store, z1)?;
        let f = self.ffn_in.forward(g, store, n2)?;
        let f = g.gelu(f)?;
        let f = self.ffn_out.forward(g, store, f)?;
        let d = g.add(a, f)?;
        tokens_to_grid(g, d, h, w)
    }
}

/// Sobel gradients fused with the input through a 1×1 conv, BN and ReLU.
#[derive(Clone, Debug)]
pub struct BoundaryExpert {
    pub sobel_x: ParamId,
    pub sobel_y: ParamId,
    pub fuse: ParamId,
    pub norm: BatchNorm2d,
    pub eps: f64,
}

/// Sobel responses of a grid: `(G_x, G_y, sqrt(G_x² + G_y² + ε))`.
pub fn sobel_maps(g: &mut Graph, x: Var, kx: Var, ky: Var, eps: f64) -> Result<(Var, Var, Var)> {
    let gx = g.depthwise_conv(x, kx, None, Padding::Replicate)?;
    let gy = g.depthwise_conv(x, ky, None, Padding::Replicate)?;
    let sx = g.square(gx)?;
    let sy = g.square(gy)?;
    let s = g.add(sx, sy)?;
    let mag = g.sqrt_eps(s, eps)?;
    Ok((gx, gy, mag))
}

impl BoundaryExpert {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            sobel_x: fixed_kernel(store, &format!("{name}.sobel_x"), channels, &SOBEL_X)?,
            sobel_y: fixed_kernel(store, &format!("{name}.sobel_y"), channels, &SOBEL_Y)?,
            fuse: store.zeros(
                &format!("{name}.fuse"),
                &[channels, 3 * channels, 1, 1],
                ParamKind::Weight,
            )?,
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), channels)?,
            eps: MAGNITUDE_EPS,
        })
    }

    pub fn delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let kx = g.param(store, self.sobel_x)?;
        let ky = g.param(store, self.sobel_y)?;
        let (gx, gy, mag) = sobel_maps(g, x, kx, ky, self.eps)?;
        let sum = g.add(gx, gy)?;
        let cat = g.concat(&[x, mag, sum], 1)?;
        let w = g.param(store, self.fuse)?;
        let y = g.pointwise_conv(cat, w, None)?;
        let y = self.norm.forward(g, store, y, ctx)?;
        Ok(g.relu(y)?)
    }
}

/// Blur and Laplacian responses fused with the input.
#[derive(Clone, Debug)]
pub struct ShapeExpert {
    pub blur: ParamId,
    pub laplace: ParamId,
    pub fuse: ParamId,
    pub norm: BatchNorm2d,
}

impl ShapeExpert {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            blur: fixed_kernel(store, &format!("{name}.blur"), channels, &BLUR)?,
            laplace: fixed_kernel(store, &format!("{name}.laplace"), channels, &LAPLACE)?,
            fuse: store.zeros(
                &format!("{name}.fuse"),
                &[channels, 3 * channels, 1, 1],
                ParamKind::Weight,
            )?,
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), channels)?,
        })
    }

    pub fn delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let kb = g.param(store, self.blur)?;
        let kl = g.param(store, self.laplace)?;
        let blur = g.depthwise_conv(x, kb, None, Padding::Replicate)?;
        let lap = g.depthwise_conv(x, kl, None, Padding::Replicate)?;
        let cat = g.concat(&[x, blur, lap], 1)?;
        let w = g.param(store, self.fuse)?;
        let y = g.pointwise_conv(cat, w, None)?;
        let y = self.norm.forward(g, store, y, ctx)?;
        Ok(g.relu(y)?)
    }
}

/// Expert slots in routing order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    Spatial = 0,
    Context = 1,
    Boundary = 2,
    Shape = 3,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Spatial,
        ExpertKind::Context,
        ExpertKind::Boundary,
        ExpertKind::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Spatial => "spatial",
            ExpertKind::Context => "context",
            ExpertKind::Boundary => "boundary",
            ExpertKind::Shape => "shape",
        }
    }
}

/// The four experts in their fixed order: spatial, context, boundary, shape.
#[derive(Clone, Debug)]
pub struct FusionExperts {
    pub spatial: SpatialExpert,
    pub context: ContextExpert,
    pub boundary: BoundaryExpert,
    pub shape: ShapeExpert,
}

impl FusionExperts {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        spatial_alpha: f64,
        heads: usize,
        expansion: usize,
    ) -> Result<Self> {
        Ok(Self {
            spatial: SpatialExpert::new(
                store,
                &format!("{name}.spatial"),
                channels,
                spatial_alpha,
            )?,
            context: ContextExpert::new(
                store,
                &format!("{name}.context"),
                channels,
                heads,
                expansion,
            )?,
            boundary: BoundaryExpert::new(store, &format!("{name}.boundary"), channels)?,
            shape: ShapeExpert::new(store, &format!("{name}.shape"), channels)?,
        })
    }

    pub fn delta(
        &self,
        kind: ExpertKind,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        match kind {
            ExpertKind::Spatial => self.spatial.delta(g, store, x),
            ExpertKind::Context => self.context.delta(g, store, x),
            ExpertKind::Boundary => self.boundary.delta(g, store, x, ctx),
            ExpertKind::Shape => self.shape.delta(g, store, x, ctx),
        }
    }

    /// `x + Δ(x)` for one expert.
    pub fn apply(
        &self,
        kind: ExpertKind,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let d = self.delta(kind, g, store, x, ctx)?;
        Ok(g.add(x, d)?)
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d> {
        vec![&self.boundary.norm, &self.shape.norm]
    }
}
