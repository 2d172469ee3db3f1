//! Backbone adapter: bottleneck projection, multi-scale context, two softly
//! routed convolutional experts, text cross-attention, and up-projection.

use sera_tensor::{
    Graph, Init, Linear, MultiHeadAttention, Padding, ParamId, ParamKind, ParamStore, Var,
};

use crate::config::AdapterConfig;
use crate::context::ForwardCtx;
use crate::error::{CoreError, Result};
use crate::experts::{grid_to_tokens, tokens_to_grid};
use crate::norm::BatchNorm2d;
use crate::routing::soft_route;

/// `ReLU(BN(G + β · DWConv3(G)))`.
#[derive(Clone, Debug)]
pub struct AdapterBoundaryExpert {
    pub dw: ParamId,
    pub norm: BatchNorm2d,
    pub beta: f64,
}

impl AdapterBoundaryExpert {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, beta: f64) -> Result<Self> {
        Ok(Self {
            dw: store.uniform_fan_in(
                &format!("{name}.dw"),
                &[channels, 1, 3, 3],
                9,
                ParamKind::Weight,
            )?,
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), channels)?,
            beta,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let k = g.param(store, self.dw)?;
        let d = g.depthwise_conv(x, k, None, Padding::Zero)?;
        let d = g.mul_scalar(d, self.beta)?;
        let s = g.add(x, d)?;
        let n = self.norm.forward(g, store, s, ctx)?;
        Ok(g.relu(n)?)
    }
}

/// `ReLU(BN(DWConv3(G))) + α · G`.
#[derive(Clone, Debug)]
pub struct AdapterSpatialExpert {
    pub dw: ParamId,
    pub norm: BatchNorm2d,
    pub alpha: f64,
}

impl AdapterSpatialExpert {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            dw: store.uniform_fan_in(
                &format!("{name}.dw"),
                &[channels, 1, 3, 3],
                9,
                ParamKind::Weight,
            )?,
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), channels)?,
            alpha,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let k = g.param(store, self.dw)?;
        let d = g.depthwise_conv(x, k, None, Padding::Zero)?;
        let n = self.norm.forward(g, store, d, ctx)?;
        let r = g.relu(n)?;
        let s = g.mul_scalar(x, self.alpha)?;
        Ok(g.add(r, s)?)
    }
}

/// Parallel 1×1, depthwise 3×3 and depthwise 5×5 branches added to the input.
#[derive(Clone, Debug)]
pub struct MultiScaleContext {
    pub point: ParamId,
    pub dw3: ParamId,
    pub dw5: ParamId,
}

impl MultiScaleContext {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            point: store.uniform_fan_in(
                &format!("{name}.point"),
                &[channels, channels, 1, 1],
                channels,
                ParamKind::Weight,
            )?,
            dw3: store.uniform_fan_in(
                &format!("{name}.dw3"),
                &[channels, 1, 3, 3],
                9,
                ParamKind::Weight,
            )?,
            dw5: store.uniform_fan_in(
                &format!("{name}.dw5"),
                &[channels, 1, 5, 5],
                25,
                ParamKind::Weight,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (p, k3, k5) = (
            g.param(store, self.point)?,
            g.param(store, self.dw3)?,
            g.param(store, self.dw5)?,
        );
        let a = g.pointwise_conv(x, p, None)?;
        let b = g.depthwise_conv(x, k3, None, Padding::Zero)?;
        let c = g.depthwise_conv(x, k5, None, Padding::Zero)?;
        let ab = g.add(a, b)?;
        let m = g.add(ab, c)?;
        Ok(g.add(x, m)?)
    }
}

/// Visual tokens attend to the one-token text sequence, with a residual.
#[derive(Clone, Debug)]
pub struct CrossModalAttention {
    pub attn: MultiHeadAttention,
}

impl CrossModalAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        text_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, name, dim, text_dim, heads, false)
                .map_err(|e| CoreError::Config(e.to_string()))?,
        })
    }

    /// `tokens: [B, N, d]`, `text: [B, 1, d_t]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        text: Var,
    ) -> Result<Var> {
        if g.shape(tokens)[0] != g.shape(text)[0] {
            return Err(CoreError::Contract(format!(
                "visual batch {} differs from text batch {}",
                g.shape(tokens)[0],
                g.shape(text)[0]
            )));
        }
        let a = self.attn.forward(g, store, tokens, text)?;
        Ok(g.add(tokens, a)?)
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub prefix: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub down: Linear,
    pub context: MultiScaleContext,
    pub spatial: AdapterSpatialExpert,
    pub boundary: AdapterBoundaryExpert,
    /// Two logits: spatial, boundary.
    pub router: Linear,
    pub cross: CrossModalAttention,
    pub up: Linear,
}

/// Intermediate values of one adapter pass, for inspection in tests.
#[derive(Clone, Debug)]
pub struct AdapterTrace {
    pub projected: Var,
    pub route: Var,
    pub corrected: Var,
    pub output: Var,
}

impl Adapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AdapterConfig,
        backbone_dim: usize,
        text_dim: usize,
        prefix: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        let d = cfg.dim;
        if d == 0 || d > backbone_dim || prefix == 0 {
            return Err(CoreError::Config(format!(
                "adapter dim {d} must lie in 1..={backbone_dim} with at least one prefix token"
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            prefix,
            grid_h,
            grid_w,
            down: Linear::new(
                store,
                &format!("{name}.down"),
                backbone_dim,
                d,
                false,
                Init::FanIn,
            )?,
            context: MultiScaleContext::new(store, &format!("{name}.context"), d)?,
            spatial: AdapterSpatialExpert::new(
                store,
                &format!("{name}.spatial"),
                d,
                cfg.expert_alpha,
            )?,
            boundary: AdapterBoundaryExpert::new(
                store,
                &format!("{name}.boundary"),
                d,
                cfg.expert_beta,
            )?,
            router: Linear::new(store, &format!("{name}.router"), d, 2, true, Init::FanIn)?,
            cross: CrossModalAttention::new(
                store,
                &format!("{name}.cross"),
                d,
                text_dim,
                cfg.heads,
            )?,
            up: Linear::new(
                store,
                &format!("{name}.up"),
                d,
                backbone_dim,
                false,
                Init::Zeros,
            )?,
        })
    }

    /// `x: [B, P, D]`, `text: [B, 1, d_t]` -> `[B, P, D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        text: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        Ok(self.trace(g, store, x, text, ctx)?.output)
    }

    pub fn trace(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        text: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<AdapterTrace> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] < self.prefix || s[1] - self.prefix != self.grid_h * self.grid_w {
            return Err(CoreError::Contract(format!(
                "token sequence {s:?} does not hold {} prefix tokens plus a {}x{} grid",
                self.prefix, self.grid_h, self.grid_w
            )));
        }
        let n = s[1] - self.prefix;
        let projected = self.down.forward(g, store, x)?;
        let projected = g.relu(projected)?;
        let prefix = g.slice(projected, 1, 0, self.prefix)?;
        let spatial = g.slice(projected, 1, self.prefix, n)?;
        let grid = tokens_to_grid(g, spatial, self.grid_h, self.grid_w)?;

        let route = soft_route(g, store, &self.router, spatial)?;
        let rich = self.context.forward(g, store, grid)?;
        let e_s = self.spatial.forward(g, store, rich, ctx)?;
        let e_b = self.boundary.forward(g, store, rich, ctx)?;
        let b = s[0];
        let w_s = g.slice(route, 1, 0, 1)?;
        let w_s = g.reshape(w_s, &[b, 1, 1, 1])?;
        let w_b = g.slice(route, 1, 1, 1)?;
        let w_b = g.reshape(w_b, &[b, 1, 1, 1])?;
        let ts = g.mul(e_s, w_s)?;
        let ts = g.mul_scalar(ts, self.cfg.mix_alpha)?;
        let tb = g.mul(e_b, w_b)?;
        let tb = g.mul_scalar(tb, self.cfg.mix_beta)?;
        let corrected = g.add(rich, ts)?;
        let corrected = g.add(corrected, tb)?;

        let flat = grid_to_tokens(g, corrected)?;
        let attended = self.cross.forward(g, store, flat, text)?;
        let joined = g.concat(&[prefix, attended], 1)?;
        let refined = g.add(joined, projected)?;
        let output = self.up.forward(g, store, refined)?;
        Ok(AdapterTrace {
            projected,
            route,
            corrected,
            output,
        })
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d> {
        vec![&self.spatial.norm, &self.boundary.norm]
    }
}
