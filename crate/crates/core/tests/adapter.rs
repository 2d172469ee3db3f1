//! Adapter experts, multi-scale context, cross-modal attention and the full
//! adapter pipeline.

use rand::Rng;
use sera_core::adapter::{
    Adapter, AdapterBoundaryExpert, AdapterSpatialExpert, CrossModalAttention, MultiScaleContext,
};
use sera_core::config::AdapterConfig;
use sera_core::experts::grid_to_tokens;
use sera_core::norm::BatchNorm2d;
use sera_core::{CoreError, ForwardCtx};
use sera_tensor::{Graph, ParamId, ParamStore, Tensor};

fn identity_stats(store: &mut ParamStore, n: &BatchNorm2d) {
    let c = store.tensor(n.running_mean).len();
    n.set_running_stats(store, &vec![0.0; c], &vec![1.0; c])
        .unwrap();
}

fn zero(store: &mut ParamStore, id: ParamId) {
    let s = store.tensor(id).shape().to_vec();
    store.set_tensor(id, Tensor::zeros(&s)).unwrap();
}

fn random(store: &mut ParamStore, id: ParamId, bound: f64) {
    let mut rng = store.rng_for(&format!("test/{}", store.get(id).name));
    let s = store.tensor(id).shape().to_vec();
    store
        .set_tensor(id, Tensor::from_fn(&s, |_| rng.random_range(-bound..bound)))
        .unwrap();
}

#[test]
fn boundary_expert_collapses_to_relu() {
    let mut store = ParamStore::new(0);
    let e = AdapterBoundaryExpert::new(&mut store, "b", 3, 0.1).unwrap();
    zero(&mut store, e.dw);
    identity_stats(&mut store, &e.norm);
    let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.61).sin());
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = e
        .forward(&mut g, &store, xv, &mut ForwardCtx::eval())
        .unwrap();
    let scale = 1.0 / (1.0 + sera_tensor::BATCH_NORM_EPS).sqrt();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b.max(0.0) * scale).abs() < 1e-15);
    }
    let neg = g.constant(Tensor::full(&[1, 3, 2, 2], -1.0)).unwrap();
    let y = e
        .forward(&mut g, &store, neg, &mut ForwardCtx::eval())
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn spatial_expert_collapses_to_scaled_input() {
    let mut store = ParamStore::new(0);
    let e = AdapterSpatialExpert::new(&mut store, "s", 3, 0.3).unwrap();
    zero(&mut store, e.dw);
    identity_stats(&mut store, &e.norm);
    let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.61).sin());
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = e
        .forward(&mut g, &store, xv, &mut ForwardCtx::eval())
        .unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, 0.3 * b);
    }
    // Zero input gives zero output with any kernel.
    random(&mut store, e.dw, 1.0);
    let z = g.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    let y = e
        .forward(&mut g, &store, z, &mut ForwardCtx::eval())
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn multi_scale_context_examples() {
    let mut store = ParamStore::new(0);
    let m = MultiScaleContext::new(&mut store, "m", 3).unwrap();
    for id in [m.point, m.dw3, m.dw5] {
        zero(&mut store, id);
    }
    let x = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64 - 20.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = m.forward(&mut g, &store, xv).unwrap();
    assert!(g.value(y).bit_eq(&x));

    let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    store.set_tensor(m.point, eye).unwrap();
    // Parameters are cached per graph, so start a fresh one.
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = m.forward(&mut g, &store, xv).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }

    random(&mut store, m.dw3, 1.0);
    random(&mut store, m.dw5, 1.0);
    for (h, w) in [(4, 4), (8, 8), (5, 7)] {
        let v = g.constant(Tensor::ones(&[2, 3, h, w])).unwrap();
        let y = m.forward(&mut g, &store, v).unwrap();
        assert_eq!(g.shape(y), &[2, 3, h, w]);
    }
}

#[test]
fn cross_attention_examples() {
    let mut store = ParamStore::new(4);
    let c = CrossModalAttention::new(&mut store, "cross", 4, 6, 2).unwrap();
    let tokens = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.3).cos());
    let text = Tensor::from_fn(&[2, 1, 6], |i| (i as f64 * 0.9).sin());

    // Single key: the attention output is the projected value of T, broadcast.
    let mut g = Graph::new();
    let (tv, xv) = (
        g.constant(tokens.clone()).unwrap(),
        g.constant(text.clone()).unwrap(),
    );
    let y = c.forward(&mut g, &store, tv, xv).unwrap();
    let v = c.attn.value.forward(&mut g, &store, xv).unwrap();
    let o = c.attn.output.forward(&mut g, &store, v).unwrap();
    let expect = g.add(tv, o).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-14);

    // Orthogonal text vectors with identical image tokens give different outputs.
    let t2 = Tensor::from_fn(&[2, 1, 6], |i| if i % 6 == 0 { 1.0 } else { 0.0 });
    let t3 = Tensor::from_fn(&[2, 1, 6], |i| if i % 6 == 1 { 1.0 } else { 0.0 });
    let a = {
        let t = g.constant(t2).unwrap();
        c.forward(&mut g, &store, tv, t).unwrap()
    };
    let b = {
        let t = g.constant(t3).unwrap();
        c.forward(&mut g, &store, tv, t).unwrap()
    };
    assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);

    let short = g.constant(Tensor::zeros(&[1, 1, 6])).unwrap();
    assert!(matches!(
        c.forward(&mut g, &store, tv, short),
        Err(CoreError::Contract(_))
    ));

    zero(&mut store, c.attn.output.weight);
    zero(&mut store, c.attn.output.bias.unwrap());
    let mut g = Graph::new();
    let (tv, xv) = (
        g.constant(tokens.clone()).unwrap(),
        g.constant(text).unwrap(),
    );
    let y = c.forward(&mut g, &store, tv, xv).unwrap();
    assert!(g.value(y).bit_eq(&tokens));
}

struct Fixture {
    store: ParamStore,
    adapter: Adapter,
    x: Tensor,
    text: Tensor,
}

fn fixture(dim: usize, d: usize, prefix: usize, gh: usize, gw: usize) -> Fixture {
    let mut store = ParamStore::new(6);
    let cfg = AdapterConfig {
        dim: d,
        heads: 2,
        ..AdapterConfig::default()
    };
    let adapter = Adapter::new(&mut store, "ad", &cfg, dim, 6, prefix, gh, gw).unwrap();
    for n in adapter.norms() {
        identity_stats(&mut store, n);
    }
    let x = Tensor::from_fn(&[2, prefix + gh * gw, dim], |i| {
        ((i * 7 % 23) as f64 - 11.0) / 6.0
    });
    let text = Tensor::from_fn(&[2, 1, 6], |i| (i as f64).cos());
    Fixture {
        store,
        adapter,
        x,
        text,
    }
}

fn run(f: &Fixture) -> Tensor {
    let mut g = Graph::new();
    let (x, t) = (
        g.constant(f.x.clone()).unwrap(),
        g.constant(f.text.clone()).unwrap(),
    );
    let y = f
        .adapter
        .forward(&mut g, &f.store, x, t, &mut ForwardCtx::eval())
        .unwrap();
    g.value(y).clone()
}

#[test]
fn adapter_is_zero_at_init_and_preserves_shape() {
    for (prefix, gh, gw) in [(1, 2, 2), (5, 3, 3), (3, 2, 4)] {
        let f = fixture(8, 4, prefix, gh, gw);
        let y = run(&f);
        assert_eq!(y.shape(), f.x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut f = f;
        random(&mut f.store, f.adapter.up.weight, 0.5);
        let y = run(&f);
        assert_eq!(y.shape(), f.x.shape());
        assert!(y.data().iter().any(|&v| v != 0.0));

        // Both projections zero: the whole pipeline is gated off.
        zero(&mut f.store, f.adapter.down.weight);
        zero(&mut f.store, f.adapter.up.weight);
        assert!(run(&f).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn adapter_rejects_non_grid_token_counts() {
    let f = fixture(8, 4, 2, 3, 3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2 + 8, 8])).unwrap();
    let t = g.constant(f.text.clone()).unwrap();
    let r = f
        .adapter
        .forward(&mut g, &f.store, x, t, &mut ForwardCtx::eval());
    assert!(matches!(r, Err(CoreError::Contract(_))));
    assert!(Adapter::new(
        &mut ParamStore::new(0),
        "a",
        &AdapterConfig {
            dim: 9,
            ..AdapterConfig::default()
        },
        8,
        6,
        1,
        2,
        2
    )
    .is_err());
}

#[test]
fn one_hot_soft_route_uses_only_the_spatial_expert() {
    let mut f = fixture(8, 4, 2, 3, 3);
    let bias = f.adapter.router.bias.unwrap();
    f.store
        .set_tensor(bias, Tensor::new(&[2], vec![1000.0, -1000.0]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let (x, t) = (
        g.constant(f.x.clone()).unwrap(),
        g.constant(f.text.clone()).unwrap(),
    );
    let mut ctx = ForwardCtx::eval();
    let tr = f.adapter.trace(&mut g, &f.store, x, t, &mut ctx).unwrap();
    assert_eq!(g.value(tr.route).data(), &[1.0, 0.0, 1.0, 0.0]);

    let spatial = g.slice(tr.projected, 1, 2, 9).unwrap();
    let grid = sera_core::experts::tokens_to_grid(&mut g, spatial, 3, 3).unwrap();
    let rich = f.adapter.context.forward(&mut g, &f.store, grid).unwrap();
    let es = f
        .adapter
        .spatial
        .forward(&mut g, &f.store, rich, &mut ctx)
        .unwrap();
    let scaled = g.mul_scalar(es, 0.25).unwrap();
    let expect = g.add(rich, scaled).unwrap();
    assert!(g.value(tr.corrected).max_abs_diff(g.value(expect)) < 1e-14);
}

#[test]
fn prefix_tokens_ride_only_the_residual() {
    // With d = D and an identity up-projection the output is the refined
    // sequence itself, whose prefix rows are 2 · X'_pre.
    let mut f = fixture(4, 4, 3, 2, 2);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    f.store.set_tensor(f.adapter.up.weight, eye).unwrap();
    let mut g = Graph::new();
    let (x, t) = (
        g.constant(f.x.clone()).unwrap(),
        g.constant(f.text.clone()).unwrap(),
    );
    let tr = f
        .adapter
        .trace(&mut g, &f.store, x, t, &mut ForwardCtx::eval())
        .unwrap();
    let pre_out = g.slice(tr.output, 1, 0, 3).unwrap();
    let pre_proj = g.slice(tr.projected, 1, 0, 3).unwrap();
    let twice = g.mul_scalar(pre_proj, 2.0).unwrap();
    assert!(g.value(pre_out).bit_eq(g.value(twice)));

    // Zeroing the spatial tokens of the input leaves the prefix rows alone.
    let mut zeroed = f.x.clone();
    let (p, n, d) = (3, 7, 4);
    for b in 0..2 {
        for i in p..n {
            for c in 0..d {
                zeroed.data_mut()[(b * n + i) * d + c] = 0.0;
            }
        }
    }
    let full = run(&f);
    f.x = zeroed;
    let part = run(&f);
    for b in 0..2 {
        for i in 0..p * d {
            assert_eq!(full.data()[b * n * d + i], part.data()[b * n * d + i]);
        }
    }
}

#[test]
fn mixing_constants_are_not_parameters() {
    let f = fixture(8, 4, 1, 2, 2);
    assert_eq!(
        (f.adapter.cfg.mix_alpha, f.adapter.cfg.mix_beta),
        (0.25, 0.15)
    );
    assert_eq!(
        (f.adapter.spatial.alpha, f.adapter.boundary.beta),
        (0.3, 0.1)
    );
    assert!(f
        .store
        .iter()
        .all(|(_, p)| !p.name.contains("alpha") && !p.name.contains("beta")));
    // Flattening the corrected grid back to tokens is a pure reshape.
    let mut g = Graph::new();
    let grid = g
        .constant(Tensor::from_fn(&[1, 4, 2, 2], |i| i as f64))
        .unwrap();
    let t = grid_to_tokens(&mut g, grid).unwrap();
    assert_eq!(g.value(t).at(&[0, 1, 2]), 9.0);
}
