//! Gradient verification of every differentiable component against central
//! finite differences in double precision. BN runs on frozen non-trivial
//! running statistics, routing noise is off, and learnable parameters are
//! randomized so that no path is trivially zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use sera_core::adapter::{
    Adapter, AdapterBoundaryExpert, AdapterSpatialExpert, CrossModalAttention, MultiScaleContext,
};
use sera_core::config::{AdapterConfig, FusionConfig, MoeLossWeights, RouterConfig};
use sera_core::experts::{ExpertKind, FusionExperts};
use sera_core::fusion::FusionBlock;
use sera_core::norm::BatchNorm2d;
use sera_core::routing::{soft_route, TopKRouter};
use sera_core::segmentation::{seg_loss, MaskHead};
use sera_core::{CoreError, ForwardCtx};
use sera_tensor::{
    finite_diff_check, GradCheckConfig, Graph, Init, LayerNorm, Linear, MultiHeadAttention,
    Padding, ParamKind, ParamStore, Tensor, TensorError, Var,
};

/// Failure threshold on the maximum relative error.
pub const FAIL_TOL: f64 = 1e-4;
/// Target accuracy.
pub const TARGET_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub worst: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub components: Vec<ComponentCheck>,
    pub passed: bool,
}

type Builder = fn() -> sera_tensor::Result<ComponentCheck>;

/// Every checked component, by name.
pub const COMPONENTS: [(&str, Builder); 16] = [
    ("tensor-ops", tensor_ops),
    ("custom-op", custom_op_correct),
    ("adapter-boundary-expert", adapter_boundary),
    ("adapter-spatial-expert", adapter_spatial),
    ("multi-scale-context", multi_scale),
    ("cross-modal-attention", cross_attention),
    ("soft-router", soft_router),
    ("adapter-pipeline", adapter_pipeline),
    ("fusion-expert-spatial", || {
        fusion_expert(ExpertKind::Spatial)
    }),
    ("fusion-expert-context", || {
        fusion_expert(ExpertKind::Context)
    }),
    ("fusion-expert-boundary", || {
        fusion_expert(ExpertKind::Boundary)
    }),
    ("fusion-expert-shape", || fusion_expert(ExpertKind::Shape)),
    ("topk-router", topk_router),
    ("routing-losses", routing_losses),
    ("fusion-block", fusion_block),
    ("seg-head", seg_head),
];

pub fn component_names() -> Vec<&'static str> {
    COMPONENTS.iter().map(|(n, _)| *n).collect()
}

/// Runs the selected components (all when `selector` is empty). Unknown
/// names are an error.
pub fn run(selector: &[String]) -> Result<GradCheckSummary, String> {
    for s in selector {
        if !COMPONENTS.iter().any(|(n, _)| n == s) {
            return Err(format!(
                "unknown component {s:?}; known: {}",
                component_names().join(", ")
            ));
        }
    }
    let mut components = Vec::new();
    for (name, build) in COMPONENTS {
        if !selector.is_empty() && !selector.iter().any(|s| s == name) {
            continue;
        }
        let check = build().map_err(|e| format!("{name}: {e}"))?;
        components.push(ComponentCheck {
            component: name.to_string(),
            ..check
        });
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradCheckSummary {
        tolerance: FAIL_TOL,
        components,
        passed,
    })
}

fn lift<T>(r: sera_core::Result<T>) -> sera_tensor::Result<T> {
    r.map_err(|e| match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    })
}

fn randomize(store: &mut ParamStore, bound: f64) -> sera_tensor::Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        if !p.kind.learnable() {
            continue;
        }
        let mut rng = store.rng_for(&format!("gradcheck/{}", p.name));
        let s = p.tensor.shape().to_vec();
        store.set_tensor(id, Tensor::from_fn(&s, |_| rng.random_range(-bound..bound)))?;
    }
    Ok(())
}

fn running_stats(store: &mut ParamStore, norms: &[&BatchNorm2d]) -> sera_tensor::Result<()> {
    for n in norms {
        let c = store.tensor(n.running_mean).len();
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64 - 0.05).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
        lift(n.set_running_stats(store, &mean, &var))?;
    }
    Ok(())
}

/// Fixed pseudo-random projection of an output to a scalar.
fn project(g: &mut Graph, y: Var) -> sera_tensor::Result<Var> {
    let s = g.shape(y).to_vec();
    let w = g.constant(Tensor::from_fn(&s, |i| {
        ((i * 7919 % 113) as f64 / 56.0) - 1.0
    }))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn grid(b: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[b, c, h, w], |i| ((i * 37 % 41) as f64 - 20.0) / 13.0)
}

/// Checks all learnable parameters of `store` on the scalar `project(f)`.
fn check<F>(store: &mut ParamStore, mut f: F) -> sera_tensor::Result<ComponentCheck>
where
    F: FnMut(&ParamStore, &mut Graph) -> sera_core::Result<Var>,
{
    check_scalar(store, |s, g| {
        let y = lift(f(s, g))?;
        project(g, y)
    })
}

fn check_scalar<F>(store: &mut ParamStore, f: F) -> sera_tensor::Result<ComponentCheck>
where
    F: FnMut(&ParamStore, &mut Graph) -> sera_tensor::Result<Var>,
{
    store.set_trainable_where(|p| p.kind.learnable());
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.get(id).trainable())
        .collect();
    let rep = finite_diff_check(store, &ids, &GradCheckConfig::default(), f)?;
    if rep.coords_checked == 0 {
        return Err(TensorError::Contract("no coordinates checked".into()));
    }
    Ok(ComponentCheck {
        component: String::new(),
        max_rel_error: rep.max_rel_error,
        max_abs_error: rep.max_abs_error,
        coords_checked: rep.coords_checked,
        worst: rep.worst.map(|(n, i)| format!("{n}[{i}]")),
        passed: rep.max_rel_error < FAIL_TOL,
    })
}

/// A composite of the primitive tape operations behind the model: linear
/// maps, activations, layer and batch norm, attention, convolutions,
/// resampling, pooling, embedding, softmaxes and the losses.
fn tensor_ops() -> sera_tensor::Result<ComponentCheck> {
    let mut store = ParamStore::new(11);
    let lin = Linear::new(&mut store, "lin", 4, 4, true, Init::FanIn)?;
    let ln = LayerNorm::new(&mut store, "ln", 4)?;
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 3, 2, false)?;
    let dw = store.uniform("dw", &[2, 1, 3, 3], 0.5, ParamKind::Weight)?;
    let dwb = store.zeros("dw.bias", &[2], ParamKind::Bias)?;
    let pw = store.uniform("pw", &[3, 2, 1, 1], 0.5, ParamKind::Weight)?;
    let bn_s = store.ones("bn.scale", &[3], ParamKind::NormScale)?;
    let bn_b = store.zeros("bn.shift", &[3], ParamKind::NormShift)?;
    let emb = store.uniform("emb", &[5, 3], 1.0, ParamKind::Weight)?;
    randomize(&mut store, 1.2)?;
    let tokens = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin());
    let img = grid(2, 2, 3, 3);
    let target = Tensor::from_fn(&[2, 3, 6, 6], |i| ((i * 3) % 5 < 2) as u8 as f64);
    let mask: Vec<bool> = (0..6).map(|i| i % 3 != 1).collect();
    check_scalar(&mut store, |s, g| {
        let t = g.constant(tokens.clone())?;
        let h = lin.forward(g, s, t)?;
        let h = g.gelu(h)?;
        let h = ln.forward(g, s, h)?;
        let e = g.param(s, emb)?;
        let kv = g.embedding(e, &[0, 3, 4, 1, 2, 2])?;
        let kv = g.reshape(kv, &[2, 3, 3])?;
        let a = mha.forward(g, s, h, kv)?;
        let a = g.softmax(a)?;
        let a1 = g.sum(a)?;
        let a2 = g.square(a)?;
        let a2 = g.mean(a2)?;

        let x = g.constant(img.clone())?;
        let (k, kb) = (g.param(s, dw)?, g.param(s, dwb)?);
        let c1 = g.depthwise_conv(x, k, Some(kb), Padding::Replicate)?;
        let c2 = g.depthwise_conv(c1, k, None, Padding::Zero)?;
        let c2 = g.sigmoid(c2)?;
        let w = g.param(s, pw)?;
        let p = g.pointwise_conv(c2, w, None)?;
        let (sc, sh) = (g.param(s, bn_s)?, g.param(s, bn_b)?);
        let p = g.batch_norm_eval(p, sc, sh, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        let p = g.relu(p)?;
        let p2 = g.add_scalar(p, 0.3)?;
        let r = g.sqrt_eps(p2, 1e-3)?;
        let q = g.div(p, r)?;
        let up = g.upsample_bilinear(q, 2)?;
        let bce = g.bce_with_logits(up, &target)?;
        let pooled = g.global_avg_pool(q)?;
        let flat = g.reshape(pooled, &[1, 6])?;
        let ms = g.masked_softmax(flat, &mask)?;
        let ms = g.mul_scalar(ms, 2.0)?;
        let m1 = g.sum(ms)?;
        let m2 = g.cv_squared(ms)?;

        let mut acc = g.add(a1, a2)?;
        for v in [bce, m1, m2] {
            acc = g.add(acc, v)?;
        }
        Ok(acc)
    })
}

fn custom_scalar(deriv: fn(f64) -> f64) -> sera_tensor::Result<ComponentCheck> {
    let mut store = ParamStore::new(12);
    let w = store.uniform("w", &[6], 1.0, ParamKind::Weight)?;
    check_scalar(&mut store, move |s, g| {
        let x = g.param(s, w)?;
        let y = g.map_custom(x, f64::sin, deriv)?;
        project(g, y)
    })
}

fn custom_op_correct() -> sera_tensor::Result<ComponentCheck> {
    custom_scalar(f64::cos)
}

/// Negative control: a deliberately wrong backward rule (d sin = sin).
pub fn corrupted_backward_control() -> sera_tensor::Result<ComponentCheck> {
    let mut c = custom_scalar(f64::sin)?;
    c.component = "corrupted-backward".into();
    Ok(c)
}

fn adapter_boundary() -> sera_tensor::Result<ComponentCheck> {
    let x = grid(2, 3, 4, 4);
    let mut store = ParamStore::new(1);
    let b = lift(AdapterBoundaryExpert::new(&mut store, "b", 3, 0.1))?;
    randomize(&mut store, 0.8)?;
    running_stats(&mut store, &[&b.norm])?;
    check(&mut store, |st, g| {
        let xv = g.constant(x.clone())?;
        b.forward(g, st, xv, &mut ForwardCtx::eval())
    })
}

fn adapter_spatial() -> sera_tensor::Result<ComponentCheck> {
    let x = grid(2, 3, 4, 4);
    let mut store = ParamStore::new(2);
    let s = lift(AdapterSpatialExpert::new(&mut store, "s", 3, 0.3))?;
    randomize(&mut store, 0.8)?;
    running_stats(&mut store, &[&s.norm])?;
    check(&mut store, |st, g| {
        let xv = g.constant(x.clone())?;
        s.forward(g, st, xv, &mut ForwardCtx::eval())
    })
}

fn multi_scale() -> sera_tensor::Result<ComponentCheck> {
    let x = grid(2, 3, 4, 4);
    let mut store = ParamStore::new(3);
    let m = lift(MultiScaleContext::new(&mut store, "m", 3))?;
    randomize(&mut store, 0.8)?;
    check(&mut store, |st, g| {
        let xv = g.constant(x.clone())?;
        m.forward(g, st, xv)
    })
}

fn cross_attention() -> sera_tensor::Result<ComponentCheck> {
    let mut store = ParamStore::new(4);
    let c = lift(CrossModalAttention::new(&mut store, "c", 4, 6, 2))?;
    randomize(&mut store, 0.6)?;
    let tokens = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.3).cos());
    let text = Tensor::from_fn(&[2, 1, 6], |i| (i as f64 * 0.9).sin());
    check(&mut store, |st, g| {
        let (t, x) = (g.constant(tokens.clone())?, g.constant(text.clone())?);
        c.forward(g, st, t, x)
    })
}

fn soft_router() -> sera_tensor::Result<ComponentCheck> {
    let mut store = ParamStore::new(5);
    let r = Linear::new(&mut store, "router", 4, 2, true, Init::FanIn)?;
    randomize(&mut store, 0.9)?;
    let tokens = Tensor::from_fn(&[3, 5, 4], |i| ((i * 11 % 17) as f64 - 8.0) / 5.0);
    check(&mut store, |st, g| {
        let t = g.constant(tokens.clone())?;
        soft_route(g, st, &r, t)
    })
}

fn adapter_pipeline() -> sera_tensor::Result<ComponentCheck> {
    let mut store = ParamStore::new(6);
    let cfg = AdapterConfig {
        dim: 4,
        heads: 2,
        ..AdapterConfig::default()
    };
    let a = lift(Adapter::new(&mut store, "ad", &cfg, 6, 5, 2, 3, 3))?;
    randomize(&mut store, 0.6)?;
    running_stats(&mut store, &a.norms())?;
    let x = Tensor::from_fn(&[2, 11, 6], |i| ((i * 13 % 31) as f64 - 15.0) / 9.0);
    let text = Tensor::from_fn(&[2, 1, 5], |i| (i as f64).sin());
    check(&mut store, |st, g| {
        let (xv, t) = (g.constant(x.clone())?, g.constant(text.clone())?);
        a.forward(g, st, xv, t, &mut ForwardCtx::eval())
    })
}

fn fusion_expert(kind: ExpertKind) -> sera_tensor::Result<ComponentCheck> {
    let x = grid(2, 4, 3, 3);
    let mut store = ParamStore::new(7);
    let ex = lift(FusionExperts::new(&mut store, "f", 4, 0.1, 2, 2))?;
    randomize(&mut store, 0.5)?;
    running_stats(&mut store, &ex.norms())?;
    check(&mut store, |st, g| {
        let xv = g.constant(x.clone())?;
        ex.apply(kind, g, st, xv, &mut ForwardCtx::eval())
    })
}

fn noiseless_router(k: usize) -> RouterConfig {
    RouterConfig {
        top_k: k,
        noise_std: 0.0,
        ..RouterConfig::default()
    }
}

/// Smallest gap between the K-th and (K+1)-th logit over the batch.
fn selection_margin(logits: &[f64], e: usize, k: usize) -> f64 {
    logits
        .chunks(e)
        .map(|row| {
            let mut s = row.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            if k < e {
                s[k - 1] - s[k]
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn topk_router() -> sera_tensor::Result<ComponentCheck> {
    let x = grid(4, 4, 3, 3);
    let mut store = ParamStore::new(8);
    let router = lift(TopKRouter::new(
        &mut store,
        "router",
        4,
        noiseless_router(2),
        None,
    ))?;
    randomize(&mut store, 0.8)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let logits = lift(router.logits(&mut g, &store, xv))?;
    // Finite differences are only meaningful away from selection ties.
    let margin = selection_margin(g.value(logits).data(), 4, 2);
    if margin < 1e-3 {
        return Err(TensorError::Contract(format!(
            "router fixture too close to a tie ({margin})"
        )));
    }
    check(&mut store, |st, g| {
        let xv = g.constant(x.clone())?;
        Ok(router.route(g, st, xv, &mut ForwardCtx::eval())?.weights)
    })
}

fn routing_losses() -> sera_tensor::Result<ComponentCheck> {
    let x = grid(4, 4, 2, 2);
    let mut store = ParamStore::new(9);
    let cfg = FusionConfig {
        router: noiseless_router(2),
        losses: MoeLossWeights {
            z: 0.3,
            logit: 0.2,
            balance: 0.5,
            token: 0.0,
        },
        context_heads: 2,
        ..FusionConfig::default()
    };
    let block = lift(FusionBlock::new(&mut store, "fusion", 4, &cfg))?;
    randomize(&mut store, 0.5)?;
    store.set_trainable_where(|p| p.name.starts_with("fusion.router"));
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.get(id).trainable())
        .collect();
    let rep = finite_diff_check(&mut store, &ids, &GradCheckConfig::default(), |st, g| {
        let xv = g.constant(x.clone())?;
        let out = lift(block.forward(g, st, xv, &mut ForwardCtx::train_without_noise()))?;
        out.aux_loss
            .ok_or_else(|| TensorError::Contract("no routing loss in training mode".into()))
    })?;
    Ok(ComponentCheck {
        component: String::new(),
        max_rel_error: rep.max_rel_error,
        max_abs_error: rep.max_abs_error,
        coords_checked: rep.coords_checked,
        worst: rep.worst.map(|(n, i)| format!("{n}[{i}]")),
        passed: rep.max_rel_error < FAIL_TOL && rep.coords_checked > 0,
    })
}

fn fusion_block() -> sera_tensor::Result<ComponentCheck> {
    let x = grid(3, 4, 3, 3);
    let mut worst: Option<ComponentCheck> = None;
    for k in [4, 2] {
        let mut store = ParamStore::new(10);
        let cfg = FusionConfig {
            router: noiseless_router(k),
            losses: MoeLossWeights::zero(),
            context_heads: 2,
            ..FusionConfig::default()
        };
        let block = lift(FusionBlock::new(&mut store, "fusion", 4, &cfg))?;
        randomize(&mut store, 0.8)?;
        running_stats(&mut store, &block.norms())?;
        let c = check(&mut store, |st, g| {
            let xv = g.constant(x.clone())?;
            Ok(block.forward(g, st, xv, &mut ForwardCtx::eval())?.y)
        })?;
        let coords = worst.as_ref().map_or(0, |w| w.coords_checked);
        worst = Some(match worst {
            Some(w) if w.max_rel_error >= c.max_rel_error => ComponentCheck {
                coords_checked: coords + c.coords_checked,
                ..w
            },
            _ => ComponentCheck {
                coords_checked: coords + c.coords_checked,
                ..c
            },
        });
    }
    Ok(worst.expect("two settings checked"))
}

fn seg_head() -> sera_tensor::Result<ComponentCheck> {
    let mut store = ParamStore::new(13);
    let head = lift(MaskHead::new(&mut store, "head", 4, 5, 3, 2))?;
    randomize(&mut store, 0.7)?;
    let feats = grid(2, 4, 3, 3);
    let text = Tensor::from_fn(&[2, 1, 3], |i| (i as f64 * 1.3).cos());
    let gt = Tensor::from_fn(&[2, 1, 6, 6], |i| ((i * 5) % 7 < 3) as u8 as f64);
    check_scalar(&mut store, |st, g| {
        let (f, t) = (g.constant(feats.clone())?, g.constant(text.clone())?);
        let logits = lift(head.forward(g, st, f, t))?;
        lift(seg_loss(g, logits, &gt))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_backward_is_detected() {
        let c = corrupted_backward_control().unwrap();
        assert!(!c.passed, "{c:?}");
        assert!(c.max_rel_error > 1e-2);
        assert!(custom_op_correct().unwrap().passed);
    }

    #[test]
    fn selection_margin_examples() {
        assert_eq!(selection_margin(&[3.0, 1.0, 2.0, 0.0], 4, 2), 1.0);
        assert_eq!(selection_margin(&[1.0, 1.0, 0.0, 0.0], 4, 1), 0.0);
        assert!(selection_margin(&[1.0, 2.0], 2, 2).is_infinite());
    }

    #[test]
    fn unknown_component_is_rejected() {
        assert!(run(&["nope".into()]).is_err());
    }
}
