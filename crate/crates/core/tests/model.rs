//! Backbone, text encoder, freeze policy, assembled model and checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sera_core::backbone::{TextEncoder, VisionBackbone};
use sera_core::checkpoint;
use sera_core::config::{AdapterConfig, BackboneConfig, Components, FusionConfig, ModelConfig};
use sera_core::freeze::{apply_freeze_policy, freeze_report, in_backbone_scope, FreezePolicy};
use sera_core::segmentation::seg_loss;
use sera_core::{CoreError, ForwardCtx, HasNorms, SeraModel};
use sera_tensor::{Adam, AdamConfig, Graph, ParamKind, ParamStore, Tensor};

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        dim: 8,
        heads: 2,
        registers: 2,
        ffn_ratio: 2,
        adapter_blocks: vec![1],
        adapter_scale: 0.1,
        text_vocab: 10,
        text_dim: 8,
        text_heads: 2,
        text_max_len: 6,
    }
}

fn tiny(components: Components) -> ModelConfig {
    ModelConfig {
        components,
        backbone: tiny_backbone(),
        adapter: AdapterConfig {
            dim: 4,
            heads: 2,
            ..AdapterConfig::default()
        },
        fusion: FusionConfig {
            context_heads: 2,
            ..FusionConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn images(b: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 3, size, size], |_| rng.random_range(0.0..1.0))
}

fn exprs() -> Vec<Vec<usize>> {
    vec![vec![3, 4, 5], vec![], vec![9, 1]]
}

fn encode(store: &ParamStore, bb: &VisionBackbone, text: &TextEncoder, imgs: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval();
    let t = text.encode(&mut g, store, &exprs(), &mut ctx).unwrap();
    let x = g.constant(imgs.clone()).unwrap();
    let y = bb
        .encode_image(&mut g, store, x, Some(t), &mut ctx)
        .unwrap();
    g.value(y).clone()
}

fn backbone_with(scale: f64, adapters: bool) -> (ParamStore, VisionBackbone, TextEncoder) {
    let mut cfg = tiny_backbone();
    cfg.adapter_scale = scale;
    let mut store = ParamStore::new(7);
    let text = TextEncoder::new(&mut store, &cfg).unwrap();
    let acfg = AdapterConfig {
        dim: 4,
        heads: 2,
        ..AdapterConfig::default()
    };
    let bb = VisionBackbone::new(&mut store, &cfg, adapters.then_some(&acfg)).unwrap();
    for n in bb.norms() {
        let c = store.tensor(n.running_mean).len();
        n.set_running_stats(&mut store, &vec![0.0; c], &vec![1.0; c])
            .unwrap();
    }
    (store, bb, text)
}

fn randomize_up(store: &mut ParamStore) {
    let id = store.id("adapter1.up.weight").unwrap();
    let mut rng = store.rng_for("up");
    let s = store.tensor(id).shape().to_vec();
    store
        .set_tensor(id, Tensor::from_fn(&s, |_| rng.random_range(-0.5..0.5)))
        .unwrap();
}

#[test]
fn token_count_and_resolution_contract() {
    let (store, bb, text) = backbone_with(0.1, true);
    let y = encode(&store, &bb, &text, &images(3, 16, 0));
    assert_eq!(y.shape(), &[3, 1 + 2 + 16, 8]);
    assert_eq!(tiny_backbone().token_count(), 19);
    let mut g = Graph::new();
    let x = g.constant(images(1, 12, 0)).unwrap();
    assert!(bb
        .encode_image(&mut g, &store, x, None, &mut ForwardCtx::eval())
        .is_err());
}

#[test]
fn zero_scale_or_zero_adapters_match_the_plain_backbone() {
    let imgs = images(3, 16, 1);
    let (s0, plain, t0) = backbone_with(0.1, false);
    let reference = encode(&s0, &plain, &t0, &imgs);

    // Zero-initialised adapters, nonzero scale.
    let (s1, bb, t1) = backbone_with(0.7, true);
    assert!(encode(&s1, &bb, &t1, &imgs).bit_eq(&reference));

    // Active adapters, zero scale.
    let (mut s2, bb, t2) = backbone_with(0.0, true);
    randomize_up(&mut s2);
    assert!(encode(&s2, &bb, &t2, &imgs).bit_eq(&reference));

    // Active adapters, nonzero scale: different output.
    let (mut s3, bb, t3) = backbone_with(0.5, true);
    randomize_up(&mut s3);
    assert!(!encode(&s3, &bb, &t3, &imgs).bit_eq(&reference));
}

#[test]
fn adapter_contribution_is_linear_in_scale() {
    // One adapter block placed last, so the adapter input is the same for all
    // scales and only the final residual term scales.
    let mut cfg = tiny_backbone();
    cfg.adapter_blocks = vec![1];
    let outs: Vec<Tensor> = [0.0, 0.25, 0.5]
        .iter()
        .map(|&s| {
            let (mut store, bb, text) = backbone_with(s, true);
            randomize_up(&mut store);
            // Drop the final norm to observe the raw residual stream.
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval();
            let t = text.encode(&mut g, &store, &exprs(), &mut ctx).unwrap();
            let mut x = {
                let imgs = g.constant(images(3, 16, 2)).unwrap();
                let p = bb.cfg.patch_size;
                let r = g.reshape(imgs, &[3, 3, 4, p, 4, p]).unwrap();
                let r = g.permute(r, &[0, 2, 4, 1, 3, 5]).unwrap();
                let patches = g.reshape(r, &[3, 16, 3 * p * p]).unwrap();
                let tok = bb.patch.forward(&mut g, &store, patches).unwrap();
                let pos = g.param(&store, bb.position).unwrap();
                let tok = g.add(tok, pos).unwrap();
                let z = g.constant(Tensor::zeros(&[3, 3, 8])).unwrap();
                let pre = g.param(&store, bb.prefix).unwrap();
                let pre = g.add(z, pre).unwrap();
                g.concat(&[pre, tok], 1).unwrap()
            };
            for b in &bb.blocks {
                x = b.forward(&mut g, &store, x, Some(t), s, &mut ctx).unwrap();
            }
            g.value(x).clone()
        })
        .collect();
    let d1: Vec<f64> = outs[1]
        .data()
        .iter()
        .zip(outs[0].data())
        .map(|(a, b)| a - b)
        .collect();
    let d2: Vec<f64> = outs[2]
        .data()
        .iter()
        .zip(outs[0].data())
        .map(|(a, b)| a - b)
        .collect();
    assert!(d1.iter().any(|v| v.abs() > 1e-6));
    for (a, b) in d1.iter().zip(&d2) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn text_encoder_contract() {
    let cfg = tiny_backbone();
    let mut store = ParamStore::new(3);
    let text = TextEncoder::new(&mut store, &cfg).unwrap();
    let run = |e: Vec<Vec<usize>>| {
        let mut g = Graph::new();
        let t = text
            .encode(&mut g, &store, &e, &mut ForwardCtx::eval())
            .unwrap();
        g.value(t).clone()
    };
    let a = run(vec![vec![2, 5, 7]]);
    assert_eq!(a.shape(), &[1, 1, 8]);
    assert!(a.bit_eq(&run(vec![vec![2, 5, 7]])));
    let empty = run(vec![vec![]]);
    assert!(empty.is_finite());
    let b = run(vec![vec![2, 6, 7]]);
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot / (na * nb) < 1.0 - 1e-9);

    let mut g = Graph::new();
    assert!(matches!(
        text.encode(&mut g, &store, &[vec![10]], &mut ForwardCtx::eval()),
        Err(CoreError::Contract(_))
    ));
    assert!(text
        .encode(&mut g, &store, &[vec![1; 7]], &mut ForwardCtx::eval())
        .is_err());
}

#[test]
fn default_freeze_policy_trains_under_one_percent_of_the_backbone() {
    let model = SeraModel::new(&ModelConfig::default(), 0).unwrap();
    let r = freeze_report(&model.store);
    assert!(
        r.backbone_fraction > 0.0 && r.backbone_fraction < 0.01,
        "{r:?}"
    );
    for (_, p) in model.store.iter() {
        let expect = p.kind.learnable()
            && (!in_backbone_scope(&p.name)
                || matches!(
                    p.kind,
                    ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift
                ));
        assert_eq!(p.trainable(), expect, "{}", p.name);
    }
    let mut store = model.store.clone();
    assert_eq!(
        apply_freeze_policy(&mut store, FreezePolicy::Frozen).backbone_fraction,
        0.0
    );
    assert_eq!(
        apply_freeze_policy(&mut store, FreezePolicy::TrainAll).backbone_fraction,
        1.0
    );
}

#[test]
fn optimizer_steps_leave_frozen_tensors_bitwise_unchanged() {
    let mut model = SeraModel::new(&tiny(Components::Full), 5).unwrap();
    let initial = model.store.clone();
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    })
    .unwrap();
    let imgs = images(3, 16, 4);
    let gt = Tensor::from_fn(&[3, 1, 16, 16], |i| {
        ((i / 16 + i % 16) % 3 == 0) as u8 as f64
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::train(&mut rng);
        let out = model.forward(&mut g, &imgs, &exprs(), &mut ctx).unwrap();
        let seg = seg_loss(&mut g, out.logits, &gt).unwrap();
        let loss = g.add(seg, out.aux_loss.unwrap()).unwrap();
        g.backward(loss).unwrap();
        adam.step(&mut model.store, &g.param_grads()).unwrap();
        ctx.apply_norm_updates(&mut model.store);
    }
    let mut changed = 0;
    for ((_, now), (_, before)) in model.store.iter().zip(initial.iter()) {
        if now.trainable() {
            changed += usize::from(!now.tensor.bit_eq(&before.tensor));
        } else if now.kind != ParamKind::RunningStat {
            assert!(now.tensor.bit_eq(&before.tensor), "{} moved", now.name);
        }
    }
    assert!(changed > 0);
}

#[test]
fn full_model_is_bitwise_the_baseline_at_init() {
    let imgs = images(3, 16, 9);
    for training in [true, false] {
        let mut outs = Vec::new();
        for comp in [Components::Baseline, Components::Adapter, Components::Full] {
            let mut m = SeraModel::new(&tiny(comp), 11).unwrap();
            m.set_identity_running_stats().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut ctx = if training {
                ForwardCtx::train(&mut rng)
            } else {
                ForwardCtx::eval()
            };
            let mut g = Graph::new();
            let out = m.forward(&mut g, &imgs, &exprs(), &mut ctx).unwrap();
            assert_eq!(g.shape(out.logits), &[3, 1, 16, 16]);
            assert_eq!(out.aux_loss.is_some(), training && comp == Components::Full);
            outs.push(g.value(out.logits).clone());
        }
        assert!(
            outs[1].bit_eq(&outs[0]),
            "adapter differs, training={training}"
        );
        assert!(
            outs[2].bit_eq(&outs[0]),
            "full differs, training={training}"
        );
    }
}

#[test]
fn eval_without_running_statistics_is_a_state_error() {
    let m = SeraModel::new(&tiny(Components::Full), 0).unwrap();
    assert!(!m.norms().is_empty());
    let mut g = Graph::new();
    let r = m.forward(
        &mut g,
        &images(1, 16, 0),
        &[vec![1]],
        &mut ForwardCtx::eval(),
    );
    assert!(matches!(r, Err(CoreError::State(_))));
}

#[test]
fn invalid_model_configs_are_rejected() {
    let mut c = tiny(Components::Full);
    c.fusion.router.top_k = 5;
    assert!(matches!(SeraModel::new(&c, 0), Err(CoreError::Config(_))));
    let mut c = tiny(Components::Full);
    c.adapter.dim = 9;
    assert!(SeraModel::new(&c, 0).is_err());
    let mut c = tiny(Components::Full);
    c.backbone.image_size = 18;
    assert!(SeraModel::new(&c, 0).is_err());
    let mut c = tiny(Components::Full);
    c.backbone.adapter_blocks = vec![2];
    assert!(SeraModel::new(&c, 0).is_err());
    let json = r#"{"components":"full","bogus":1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut m = SeraModel::new(&tiny(Components::Full), 21).unwrap();
    m.set_identity_running_stats().unwrap();
    let id = m.store.id("adapter1.up.weight").unwrap();
    let s = m.store.tensor(id).shape().to_vec();
    m.store
        .set_tensor(id, Tensor::from_fn(&s, |i| (i as f64).sin() * 1e-3))
        .unwrap();

    let dir = std::env::temp_dir().join(format!("sera-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    checkpoint::save(&path, &m).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.store.len(), m.store.len());
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.bit_eq(&b.tensor));
        assert_eq!(a.trainable(), b.trainable());
    }
    assert_eq!(
        checkpoint::to_bytes(&back).unwrap(),
        std::fs::read(&path).unwrap()
    );

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(
        checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(CoreError::Checkpoint(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    let mut bad = bytes;
    bad[8] = 9;
    assert!(checkpoint::from_bytes(&bad).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
