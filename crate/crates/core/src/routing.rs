//! Soft routing, noisy-temperature Top-K routing, expert aggregation and the
//! auxiliary routing losses.

use rand::Rng;
use rand_distr::Normal;
use sera_tensor::{Graph, Init, Linear, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{MoeLossWeights, RouterConfig};
use crate::context::ForwardCtx;
use crate::error::{CoreError, Result};

/// Routing outcome for one batch, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Raw router logits, `[B, E]`.
    pub logits: Tensor,
    /// Noise-perturbed, temperature-scaled logits, `[B, E]`.
    pub perturbed: Tensor,
    /// Sparse mixture weights, `[B, E]`.
    pub weights: Tensor,
    /// Per-sample selected experts in ascending index order.
    pub selected: Vec<Vec<usize>>,
}

impl RoutingDecision {
    pub fn batch(&self) -> usize {
        self.selected.len()
    }

    pub fn num_experts(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Tape handles of a routing pass plus its detached decision.
#[derive(Clone, Debug)]
pub struct Routed {
    pub logits: Var,
    pub perturbed: Var,
    pub weights: Var,
    pub decision: RoutingDecision,
}

/// Indices of the `k` largest entries; ties go to the lower index. Returned
/// in ascending index order.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut sel: Vec<usize> = order.into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

fn selection_mask(selected: &[Vec<usize>], e: usize) -> Vec<bool> {
    let mut mask = vec![false; selected.len() * e];
    for (b, sel) in selected.iter().enumerate() {
        for &i in sel {
            mask[b * e + i] = true;
        }
    }
    mask
}

/// Softmax restricted to each row's Top-K entries of `perturbed` (`[B, E]`).
pub fn sparse_weights(g: &mut Graph, perturbed: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
    let s = g.shape(perturbed).to_vec();
    if s.len() != 2 {
        return Err(CoreError::Contract(format!(
            "router logits must be [B, E], got {s:?}"
        )));
    }
    let e = s[1];
    if k == 0 || k > e {
        return Err(CoreError::Config(format!("top_k {k} must lie in 1..={e}")));
    }
    let selected: Vec<Vec<usize>> = g
        .value(perturbed)
        .data()
        .chunks(e)
        .map(|row| top_k_indices(row, k))
        .collect();
    let mask = selection_mask(&selected, e);
    let w = g.masked_softmax(perturbed, &mask)?;
    Ok((w, selected))
}

/// Adapter-side soft router: mean over spatial tokens `[B, N, d]`, a linear
/// layer to two logits, then softmax. Returns `[B, 2]`.
pub fn soft_route(g: &mut Graph, store: &ParamStore, router: &Linear, tokens: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return Err(CoreError::Contract(format!(
            "soft routing needs at least one spatial token, got shape {s:?}"
        )));
    }
    let z = g.mean_axis(tokens, 1)?;
    let logits = router.forward(g, store, z)?;
    Ok(g.softmax(logits)?)
}

/// Fusion-side router: global average pool, a two-layer ReLU MLP, optional
/// Gaussian perturbation in training, temperature, then Top-K sparse softmax.
#[derive(Clone, Debug)]
pub struct TopKRouter {
    pub cfg: RouterConfig,
    pub hidden: Linear,
    pub output: Linear,
}

impl TopKRouter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: RouterConfig,
        bias_init: Option<&[f64]>,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_for(channels);
        let hidden = Linear::new(
            store,
            &format!("{name}.hidden"),
            channels,
            h,
            true,
            Init::FanIn,
        )?;
        let output = Linear::new(
            store,
            &format!("{name}.output"),
            h,
            cfg.num_experts,
            true,
            Init::FanIn,
        )?;
        if let (Some(b), Some(id)) = (bias_init, output.bias) {
            store.set_tensor(id, Tensor::new(&[cfg.num_experts], b.to_vec())?)?;
        }
        Ok(Self {
            cfg,
            hidden,
            output,
        })
    }

    /// Raw logits `[B, E]` of a `[B, C, H, W]` grid.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let z = g.global_avg_pool(x)?;
        let h = self.hidden.forward(g, store, z)?;
        let h = g.relu(h)?;
        Ok(self.output.forward(g, store, h)?)
    }

    pub fn route(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Routed> {
        let logits = self.logits(g, store, x)?;
        let noisy = if ctx.training() && self.cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.cfg.noise_std)
                .map_err(|e| CoreError::Config(format!("router noise: {e}")))?;
            let shape = g.shape(logits).to_vec();
            let rng = ctx.rng()?;
            let eps = Tensor::from_fn(&shape, |_| rng.sample(normal));
            let eps = g.constant(eps)?;
            g.add(logits, eps)?
        } else {
            logits
        };
        let perturbed = if self.cfg.temperature == 1.0 {
            noisy
        } else {
            g.mul_scalar(noisy, 1.0 / self.cfg.temperature)?
        };
        let (weights, selected) = sparse_weights(g, perturbed, self.cfg.top_k)?;
        let decision = RoutingDecision {
            logits: g.value(logits).clone(),
            perturbed: g.value(perturbed).clone(),
            weights: g.value(weights).clone(),
            selected,
        };
        Ok(Routed {
            logits,
            perturbed,
            weights,
            decision,
        })
    }
}

fn weight_column(g: &mut Graph, weights: Var, i: usize, rank: usize) -> Result<Var> {
    let b = g.shape(weights)[0];
    let col = g.slice(weights, 1, i, 1)?;
    let mut shape = vec![b];
    shape.resize(rank, 1);
    Ok(g.reshape(col, &shape)?)
}

/// Per-sample weighted sum `Σ_i w_i · E_i` of expert outputs.
pub fn aggregate_experts(g: &mut Graph, outputs: &[Var], weights: Var) -> Result<Var> {
    let first = outputs
        .first()
        .ok_or_else(|| CoreError::Contract("no expert outputs".into()))?;
    let shape = g.shape(*first).to_vec();
    if outputs.iter().any(|&o| g.shape(o) != shape.as_slice()) {
        return Err(CoreError::Contract("expert outputs differ in shape".into()));
    }
    let ws = g.shape(weights).to_vec();
    if ws != [shape[0], outputs.len()] {
        return Err(CoreError::Contract(format!(
            "weights {ws:?} do not match {} experts",
            outputs.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        let w = weight_column(g, weights, i, shape.len())?;
        let term = g.mul(o, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one expert"))
}

/// Residual form `x + Σ_i w_i · Δ_i`, equal to `Σ_i w_i (x + Δ_i)` whenever the
/// weights sum to one. `None` marks an expert that was not evaluated because
/// no sample selected it; it contributes exactly nothing.
pub fn aggregate_residual(
    g: &mut Graph,
    x: Var,
    deltas: &[Option<Var>],
    weights: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut acc: Option<Var> = None;
    for (i, d) in deltas.iter().enumerate() {
        let Some(d) = *d else { continue };
        if g.shape(d) != shape.as_slice() {
            return Err(CoreError::Contract(
                "expert output shape differs from input".into(),
            ));
        }
        let w = weight_column(g, weights, i, shape.len())?;
        let term = g.mul(d, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(g.add(x, a)?),
        None => Ok(x),
    }
}

/// `λ · mean(r²)`.
pub fn z_loss(g: &mut Graph, logits: Var, lambda: f64) -> Result<Var> {
    let sq = g.square(logits)?;
    let m = g.mean(sq)?;
    Ok(g.mul_scalar(m, lambda)?)
}

/// `λ · CV²(u)` where `u_i` is expert i's share of the batch routing mass.
pub fn balance_loss(g: &mut Graph, weights: Var, lambda: f64) -> Result<Var> {
    if g.value(weights).data().iter().all(|&v| v == 0.0) {
        return Err(CoreError::Contract(
            "balance loss of all-zero routing weights".into(),
        ));
    }
    let mass = g.sum_axis(weights, 0)?;
    let total = g.sum(mass)?;
    let u = g.div(mass, total)?;
    let cv = g.cv_squared(u)?;
    Ok(g.mul_scalar(cv, lambda)?)
}

/// `λ · CV²(f)` where `f_i` is the fraction of samples whose Top-K set holds
/// expert i. Its gradient reaches the router through a straight-through
/// estimate based on the dense softmax of `perturbed`.
pub fn token_fraction_loss(
    g: &mut Graph,
    perturbed: Var,
    selected: &[Vec<usize>],
    lambda: f64,
) -> Result<Var> {
    let e = g.shape(perturbed)[1];
    let mask = selection_mask(selected, e);
    let cv = g.selection_cv_squared(perturbed, &mask)?;
    Ok(g.mul_scalar(cv, lambda)?)
}

/// The full auxiliary objective: `z + logit + balance + token` terms. Only
/// defined in training mode.
pub fn moe_loss(g: &mut Graph, routed: &Routed, w: &MoeLossWeights, training: bool) -> Result<Var> {
    if !training {
        return Err(CoreError::Contract(
            "routing losses are only defined in training mode".into(),
        ));
    }
    let z = z_loss(g, routed.logits, w.z)?;
    let logit = z_loss(g, routed.logits, w.logit)?;
    let bal = balance_loss(g, routed.weights, w.balance)?;
    let tok = token_fraction_loss(g, routed.perturbed, &routed.decision.selected, w.token)?;
    let a = g.add(z, logit)?;
    let b = g.add(bal, tok)?;
    Ok(g.add(a, b)?)
}

/// Per-expert mean routing weight and selection frequency over many decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub samples: usize,
    pub mean_weight: Vec<f64>,
    pub selection_freq: Vec<f64>,
}

impl RoutingStats {
    /// Smallest selection frequency over experts.
    pub fn min_selection_freq(&self) -> f64 {
        self.selection_freq
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn routing_stats(decisions: &[RoutingDecision]) -> Result<RoutingStats> {
    let e = decisions
        .first()
        .ok_or_else(|| CoreError::Contract("routing stats of an empty set".into()))?
        .num_experts();
    let mut mass = vec![0.0; e];
    let mut freq = vec![0.0; e];
    let mut n = 0usize;
    for d in decisions {
        if d.num_experts() != e {
            return Err(CoreError::Contract(
                "decisions disagree on expert count".into(),
            ));
        }
        for (row, sel) in d.weights.data().chunks(e).zip(&d.selected) {
            for (m, w) in mass.iter_mut().zip(row) {
                *m += w;
            }
            for &i in sel {
                freq[i] += 1.0;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::Contract("routing stats of an empty set".into()));
    }
    Ok(RoutingStats {
        samples: n,
        mean_weight: mass.into_iter().map(|m| m / n as f64).collect(),
        selection_freq: freq.into_iter().map(|f| f / n as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_the_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.0], 1), vec![1]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0, 2.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.0, 5.0, -1.0, 4.0], 2), vec![1, 3]);
    }
}
