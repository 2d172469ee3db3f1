//! The fusion block: four experts under a Top-K router.

use sera_tensor::{Graph, ParamStore, Var};

use crate::config::{FusionConfig, MoeLossWeights};
use crate::context::ForwardCtx;
use crate::error::Result;
use crate::experts::{ExpertKind, FusionExperts};
use crate::norm::BatchNorm2d;
use crate::routing::{aggregate_residual, moe_loss, Routed, TopKRouter};

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub experts: FusionExperts,
    pub router: TopKRouter,
    pub losses: MoeLossWeights,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub y: Var,
    pub routed: Routed,
    /// Routing losses; `None` in eval mode, where none are computed.
    pub aux_loss: Option<Var>,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        Ok(Self {
            experts: FusionExperts::new(
                store,
                name,
                channels,
                cfg.spatial_alpha,
                cfg.context_heads,
                cfg.ffn_expansion,
            )?,
            router: TopKRouter::new(
                store,
                &format!("{name}.router"),
                channels,
                cfg.router.clone(),
                cfg.router_bias_init.as_deref(),
            )?,
            losses: cfg.losses.clone(),
        })
    }

    /// Routes, evaluates experts, aggregates and (in training) computes the
    /// routing losses. In eval mode only experts selected by some sample are
    /// evaluated. The decision is also appended to `ctx.decisions`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<FusionOutput> {
        let lazy = !ctx.training();
        self.forward_inner(g, store, x, ctx, lazy)
    }

    /// Like [`FusionBlock::forward`] but always evaluates all four experts.
    pub fn forward_eager(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<FusionOutput> {
        self.forward_inner(g, store, x, ctx, false)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
        lazy: bool,
    ) -> Result<FusionOutput> {
        let routed = self.router.route(g, store, x, ctx)?;
        let mut deltas = Vec::with_capacity(4);
        for kind in ExpertKind::ALL {
            let used = routed
                .decision
                .selected
                .iter()
                .any(|s| s.contains(&(kind as usize)));
            if lazy && !used {
                deltas.push(None);
            } else {
                deltas.push(Some(self.experts.delta(kind, g, store, x, ctx)?));
            }
        }
        let y = aggregate_residual(g, x, &deltas, routed.weights)?;
        let aux_loss = if ctx.training() {
            Some(moe_loss(g, &routed, &self.losses, true)?)
        } else {
            None
        };
        ctx.decisions.push(routed.decision.clone());
        Ok(FusionOutput {
            y,
            routed,
            aux_loss,
        })
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d> {
        self.experts.norms()
    }
}
