//! Every differentiable op against central finite differences.

use sera_tensor::{
    finite_diff_check, GradCheckConfig, Graph, MultiHeadAttention, Padding, ParamId, ParamKind,
    ParamStore, Result, Tensor, Var,
};

const TOL: f64 = 1e-5;

/// Projects an op output onto a fixed random direction so every output
/// coordinate contributes to the checked scalar.
fn project(g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = store.rng_for("__projection");
    use rand::Rng;
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn input(store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
    store.uniform(name, shape, 1.0, ParamKind::Weight).unwrap()
}

fn check<F>(store: &mut ParamStore, ids: &[ParamId], mut f: F) -> f64
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let rep = finite_diff_check(store, ids, &GradCheckConfig::default(), |s, g| {
        let y = f(s, g)?;
        project(g, s, y)
    })
    .unwrap();
    assert!(rep.coords_checked > 0);
    rep.max_rel_error
}

#[test]
fn matmul_and_bmm() {
    let mut ps = ParamStore::new(1);
    let a = input(&mut ps, "a", &[3, 4]);
    let b = input(&mut ps, "b", &[4, 5]);
    let e = check(&mut ps, &[a, b], |s, g| {
        let (a, b) = (g.param(s, a)?, g.param(s, b)?);
        g.matmul(a, b)
    });
    assert!(e < TOL, "matmul {e}");

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut ps = ParamStore::new(2);
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let a = input(&mut ps, "a", &sa);
        let b = input(&mut ps, "b", &sb);
        let e = check(&mut ps, &[a, b], |s, g| {
            let (a, b) = (g.param(s, a)?, g.param(s, b)?);
            g.bmm(a, b, ta, tb)
        });
        assert!(e < TOL, "bmm {ta} {tb}: {e}");
    }
}

#[test]
fn gradient_of_sum_of_product_matches_fd_at_1e6() {
    let mut ps = ParamStore::new(9);
    let a = input(&mut ps, "a", &[2, 3]);
    let b = input(&mut ps, "b", &[3, 2]);
    let rep = finite_diff_check(&mut ps, &[a], &GradCheckConfig::default(), |s, g| {
        let (a, b) = (g.param(s, a)?, g.param(s, b)?);
        let c = g.matmul(a, b)?;
        g.sum(c)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-6);
}

#[test]
fn broadcasting_binary_ops() {
    let mut ps = ParamStore::new(3);
    let a = input(&mut ps, "a", &[2, 3, 4]);
    let b = input(&mut ps, "b", &[3, 1]);
    // keep the divisor away from zero
    let d = ps.uniform("d", &[4], 0.5, ParamKind::Weight).unwrap();
    let e = check(&mut ps, &[a, b, d], |s, g| {
        let (a, b, d) = (g.param(s, a)?, g.param(s, b)?, g.param(s, d)?);
        let d = g.add_scalar(d, 2.0)?;
        let x = g.add(a, b)?;
        let x = g.mul(x, b)?;
        let x = g.sub(x, a)?;
        let x = g.div(x, d)?;
        g.mul_scalar(x, 1.5)
    });
    assert!(e < TOL, "binary {e}");
}

#[test]
fn unary_ops() {
    let mut ps = ParamStore::new(4);
    let x = input(&mut ps, "x", &[2, 4, 3]);
    let e = check(&mut ps, &[x], |s, g| {
        let x = g.param(s, x)?;
        let a = g.sigmoid(x)?;
        let b = g.gelu(x)?;
        let c = g.square(x)?;
        let d = g.sqrt_eps(c, 1e-1)?;
        let r = g.relu(x)?;
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        let t = g.add(ab, cd)?;
        g.add(t, r)
    });
    assert!(e < TOL, "unary {e}");
}

#[test]
fn reductions_and_softmax() {
    let mut ps = ParamStore::new(5);
    let x = input(&mut ps, "x", &[2, 3, 4]);
    let e = check(&mut ps, &[x], |s, g| {
        let x = g.param(s, x)?;
        let m = g.mean_axis(x, 1)?;
        let sm = g.softmax(m)?;
        let s2 = g.sum_axis(x, 2)?;
        let sm2 = g.softmax(s2)?;
        let a = g.sum(sm)?;
        let b = g.mul(sm2, sm2)?;
        let b = g.sum(b)?;
        let t = g.add(a, b)?;
        let m = g.mean(x)?;
        let t = g.add(t, m)?;
        g.reshape(t, &[1])
    });
    assert!(e < TOL, "reductions {e}");
}

#[test]
fn masked_softmax() {
    let mut ps = ParamStore::new(6);
    let x = input(&mut ps, "x", &[3, 4]);
    let mask = [
        true, false, true, true, false, true, false, false, true, true, true, true,
    ];
    let e = check(&mut ps, &[x], |s, g| {
        let x = g.param(s, x)?;
        g.masked_softmax(x, &mask)
    });
    assert!(e < TOL, "masked softmax {e}");
}

#[test]
fn layer_norm() {
    let mut ps = ParamStore::new(7);
    let x = input(&mut ps, "x", &[2, 3, 6]);
    let sc = input(&mut ps, "sc", &[6]);
    let sh = input(&mut ps, "sh", &[6]);
    let e = check(&mut ps, &[x, sc, sh], |s, g| {
        let (x, sc, sh) = (g.param(s, x)?, g.param(s, sc)?, g.param(s, sh)?);
        g.layer_norm(x, sc, sh, 1e-6)
    });
    assert!(e < TOL, "layer norm {e}");
}

#[test]
fn batch_norm_train_and_eval() {
    let mut ps = ParamStore::new(8);
    let x = input(&mut ps, "x", &[2, 4, 6, 6]);
    let sc = input(&mut ps, "sc", &[4]);
    let sh = input(&mut ps, "sh", &[4]);
    let e = check(&mut ps, &[x, sc, sh], |s, g| {
        let (x, sc, sh) = (g.param(s, x)?, g.param(s, sc)?, g.param(s, sh)?);
        Ok(g.batch_norm_train(x, sc, sh, 1e-5)?.0)
    });
    assert!(e < TOL, "batch norm train {e}");
    let e = check(&mut ps, &[x, sc, sh], |s, g| {
        let (x, sc, sh) = (g.param(s, x)?, g.param(s, sc)?, g.param(s, sh)?);
        g.batch_norm_eval(
            x,
            sc,
            sh,
            &[0.1, -0.2, 0.0, 0.3],
            &[1.0, 0.5, 2.0, 0.8],
            1e-5,
        )
    });
    assert!(e < TOL, "batch norm eval {e}");
}

#[test]
fn convolutions() {
    for padding in [Padding::Zero, Padding::Replicate] {
        for k in [1usize, 3, 5] {
            let mut ps = ParamStore::new(10 + k as u64);
            let x = input(&mut ps, "x", &[2, 4, 6, 6]);
            let w = input(&mut ps, "w", &[4, 1, k, k]);
            let b = input(&mut ps, "b", &[4]);
            let e = check(&mut ps, &[x, w, b], |s, g| {
                let (x, w, b) = (g.param(s, x)?, g.param(s, w)?, g.param(s, b)?);
                g.depthwise_conv(x, w, Some(b), padding)
            });
            assert!(e < TOL, "depthwise k={k} {padding:?}: {e}");
        }
    }
    let mut ps = ParamStore::new(20);
    let x = input(&mut ps, "x", &[2, 4, 6, 6]);
    let w = input(&mut ps, "w", &[3, 4, 1, 1]);
    let b = input(&mut ps, "b", &[3]);
    let e = check(&mut ps, &[x, w, b], |s, g| {
        let (x, w, b) = (g.param(s, x)?, g.param(s, w)?, g.param(s, b)?);
        g.pointwise_conv(x, w, Some(b))
    });
    assert!(e < TOL, "pointwise {e}");
}

#[test]
fn layout_ops() {
    let mut ps = ParamStore::new(21);
    let a = input(&mut ps, "a", &[2, 3, 4]);
    let b = input(&mut ps, "b", &[2, 2, 4]);
    let e = check(&mut ps, &[a, b], |s, g| {
        let (a, b) = (g.param(s, a)?, g.param(s, b)?);
        let c = g.concat(&[a, b], 1)?;
        let p = g.permute(c, &[2, 0, 1])?;
        let sl = g.slice(p, 2, 1, 3)?;
        let r = g.reshape(sl, &[4, 6])?;
        g.square(r)
    });
    assert!(e < TOL, "layout {e}");
}

#[test]
fn upsample_and_pool() {
    let mut ps = ParamStore::new(22);
    let x = input(&mut ps, "x", &[2, 3, 3, 4]);
    let e = check(&mut ps, &[x], |s, g| {
        let x = g.param(s, x)?;
        let u = g.upsample_bilinear(x, 4)?;
        let p = g.global_avg_pool(x)?;
        let u2 = g.square(u)?;
        let a = g.sum(u2)?;
        let p2 = g.square(p)?;
        let b = g.sum(p2)?;
        let t = g.add(a, b)?;
        g.reshape(t, &[1])
    });
    assert!(e < TOL, "upsample/pool {e}");
}

#[test]
fn embedding() {
    let mut ps = ParamStore::new(23);
    let t = input(&mut ps, "t", &[5, 3]);
    let e = check(&mut ps, &[t], |s, g| {
        let t = g.param(s, t)?;
        g.embedding(t, &[0, 3, 3, 1])
    });
    assert!(e < TOL, "embedding {e}");
}

#[test]
fn losses() {
    let mut ps = ParamStore::new(24);
    let x = input(&mut ps, "x", &[2, 1, 4, 4]);
    let target = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 5) % 3 == 0) as u8 as f64);
    let e = check(&mut ps, &[x], |s, g| {
        let x = g.param(s, x)?;
        let l = g.bce_with_logits(x, &target)?;
        g.reshape(l, &[1])
    });
    assert!(e < TOL, "bce {e}");

    let v = ps.uniform("v", &[4], 0.3, ParamKind::Weight).unwrap();
    let e = check(&mut ps, &[v], |s, g| {
        let v = g.param(s, v)?;
        let v = g.add_scalar(v, 1.0)?;
        let l = g.cv_squared(v)?;
        g.reshape(l, &[1])
    });
    assert!(e < TOL, "cv^2 {e}");
}

#[test]
fn attention() {
    let mut ps = ParamStore::new(25);
    let mha = MultiHeadAttention::new(&mut ps, "att", 8, 6, 2, false).unwrap();
    let q = input(&mut ps, "q", &[2, 5, 8]);
    let kv = input(&mut ps, "kv", &[2, 3, 6]);
    let mut ids = vec![q, kv];
    ids.extend(ps.ids().filter(|id| ps.get(*id).name.starts_with("att.")));
    let e = check(&mut ps, &ids, |s, g| {
        let (q, kv) = (g.param(s, q)?, g.param(s, kv)?);
        mha.forward(g, s, q, kv)
    });
    assert!(e < TOL, "attention {e}");
}

#[test]
fn corrupted_backward_is_detected() {
    fn cube(x: f64) -> f64 {
        x * x * x
    }
    fn wrong(x: f64) -> f64 {
        2.0 * x * x
    }
    let mut ps = ParamStore::new(26);
    let x = input(&mut ps, "x", &[6]);
    let e = check(&mut ps, &[x], |s, g| {
        let x = g.param(s, x)?;
        g.map_custom(x, cube, wrong)
    });
    assert!(e > 1e-2, "fault not detected: {e}");
}
