//! Worked examples for the tensor operations, checked against hand-derived values.

use sera_tensor::{Graph, Padding, ParamKind, ParamStore, Tensor, TensorError, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn constant(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
    g.constant(t(shape, data)).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let i2 = constant(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = constant(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = constant(&mut g, &[1, 2], &[1.0, 2.0]);
    let b = constant(&mut g, &[2, 1], &[3.0, 4.0]);
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);

    let err = g.matmul(a, a).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
}

#[test]
fn depthwise_zero_kernel_and_sobel_ramp() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::from_fn(&[1, 1, 5, 6], |i| (i % 6) as f64))
        .unwrap();
    let zero = constant(&mut g, &[1, 1, 3, 3], &[0.0; 9]);
    let y = g.depthwise_conv(x, zero, None, Padding::Zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let sobel_x = constant(
        &mut g,
        &[1, 1, 3, 3],
        &[-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    );
    let y = g
        .depthwise_conv(x, sobel_x, None, Padding::Replicate)
        .unwrap();
    let v = g.value(y);
    for i in 0..5 {
        for j in 1..5 {
            assert_eq!(v.at(&[0, 0, i, j]), 8.0);
        }
    }
}

#[test]
fn pointwise_identity_passes_input_through() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 * 0.5 - 3.0))
        .unwrap();
    let eye = g
        .constant(Tensor::from_fn(&[3, 3, 1, 1], |i| {
            if i / 3 == i % 3 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
    let y = g.pointwise_conv(x, eye, None).unwrap();
    assert!(g.value(y).bit_eq(g.value(x)));
}

#[test]
fn conv_rejects_even_kernels_and_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let k2 = g.constant(Tensor::zeros(&[2, 1, 2, 2])).unwrap();
    assert!(matches!(
        g.depthwise_conv(x, k2, None, Padding::Zero),
        Err(TensorError::Unsupported(_))
    ));
    let k3 = g.constant(Tensor::zeros(&[3, 1, 3, 3])).unwrap();
    assert!(matches!(
        g.depthwise_conv(x, k3, None, Padding::Zero),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn conv_same_padding_preserves_size() {
    for k in [1usize, 3, 5] {
        for padding in [Padding::Zero, Padding::Replicate] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(&[2, 3, 5, 7])).unwrap();
            let kern = g.constant(Tensor::ones(&[3, 1, k, k])).unwrap();
            let y = g.depthwise_conv(x, kern, None, padding).unwrap();
            assert_eq!(g.shape(y), &[2, 3, 5, 7]);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = constant(&mut g, &[2], &[1.0, 1.0]);
    let zero = constant(&mut g, &[2], &[0.0, 0.0]);
    let x = constant(&mut g, &[1, 2], &[1.0, 3.0]);
    let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

    let one4 = constant(&mut g, &[4], &[1.0; 4]);
    let zero4 = constant(&mut g, &[4], &[0.0; 4]);
    let flat = constant(&mut g, &[4], &[1.0; 4]);
    let y = g.layer_norm(flat, one4, zero4, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);
}

#[test]
fn batch_norm_train_standardises_each_channel() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::from_fn(&[3, 2, 4, 4], |i| {
            ((i * 7919) % 101) as f64 * 0.37 - 5.0
        }))
        .unwrap();
    let one = constant(&mut g, &[2], &[1.0, 1.0]);
    let zero = constant(&mut g, &[2], &[0.0, 0.0]);
    let (y, stats) = g.batch_norm_train(x, one, zero, 1e-5).unwrap();
    let v = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| (0..16).map(move |k| (b, k)))
            .map(|(b, k)| v.at(&[b, c, k / 4, k % 4]))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        // eps=1e-5 shrinks the variance slightly below 1; the ratio is exact.
        let raw_var = stats.var_unbiased[c] * (n - 1.0) / n;
        assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-10);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = constant(&mut g, &[3], &[-1.0, 0.0, 2.0]);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = constant(&mut g, &[1], &[0.0]);
    let s = g.sqrt_eps(z, 1e-6).unwrap();
    assert!((g.value(s).data()[0] - 1e-3).abs() < 1e-18);
    let sg = g.sigmoid(z).unwrap();
    assert_eq!(g.value(sg).data()[0], 0.5);
    let a = constant(&mut g, &[2], &[1.0, 2.0]);
    let b = constant(&mut g, &[3], &[1.0, 2.0, 3.0]);
    assert!(g.add(a, b).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = constant(&mut g, &[2], &[0.0, 0.0]);
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = constant(&mut g, &[4], &[2.0, 1.0, 0.0, -1.0]);
    let s = g.softmax(x).unwrap();
    let want = [0.6439, 0.2369, 0.0871, 0.0321];
    for (a, b) in g.value(s).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-4);
    }
    // exp(2-2)/(1 + e^-1 + e^-2 + e^-3), computed independently
    let denom: f64 = (0..4).map(|i| (-(i as f64)).exp()).sum();
    assert!((g.value(s).data()[0] - 1.0 / denom).abs() < 1e-15);
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::new();
    let x = constant(&mut g, &[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]);
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[3.0]);
    let one = constant(&mut g, &[2, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let p = g.global_avg_pool(one).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(g.shape(p), &[2, 3]);
}

#[test]
fn backward_examples() {
    let mut ps = ParamStore::new(0);
    let id = ps
        .add("x", ParamKind::Weight, t(&[2], &[-1.0, 2.0]))
        .unwrap();
    let mut g = Graph::new();
    let x = g.param(&ps, id).unwrap();
    let r = g.relu(x).unwrap();
    let l = g.sum(r).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 3]), true).unwrap();
    let l = g.sum(x).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    // A second pass accumulates into the leaf.
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);

    let err = g.backward(x).unwrap_err();
    assert!(matches!(err, TensorError::Contract(_)));
}

#[test]
fn non_finite_values_are_an_error() {
    let mut g = Graph::new();
    let x = constant(&mut g, &[1], &[0.0]);
    let y = constant(&mut g, &[1], &[0.0]);
    assert!(matches!(g.div(x, y), Err(TensorError::NonFinite { .. })));
}

#[test]
fn upsample_of_single_pixel_is_constant() {
    let mut g = Graph::new();
    let x = constant(&mut g, &[1, 1, 1, 1], &[0.7]);
    let y = g.upsample_bilinear(x, 8).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 8, 8]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn upsample_matches_half_pixel_formula() {
    // 2 -> 4 along a row: source coords -0.25(clamped 0), 0.25, 0.75, 1.25(clamped 1)
    let mut g = Graph::new();
    let x = constant(&mut g, &[1, 1, 1, 2], &[0.0, 4.0]);
    let y = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
}

#[test]
fn attention_single_kv_token_returns_value_path() {
    use sera_tensor::MultiHeadAttention;
    let mut ps = ParamStore::new(3);
    let mha = MultiHeadAttention::new(&mut ps, "att", 4, 4, 2, false).unwrap();
    let mut g = Graph::new();
    let q = g
        .constant(Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.1))
        .unwrap();
    let kv_t = Tensor::from_fn(&[1, 1, 4], |i| 1.0 - i as f64 * 0.3);
    let kv = g.constant(kv_t.clone()).unwrap();
    let y = mha.forward(&mut g, &ps, q, kv).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4]);
    let v = mha.value.forward(&mut g, &ps, kv).unwrap();
    let o = mha.output.forward(&mut g, &ps, v).unwrap();
    let expect = g.value(o).data().to_vec();
    for r in 0..3 {
        for (c, e) in expect.iter().enumerate() {
            assert!((g.value(y).data()[r * 4 + c] - e).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_uniform_weights_average_values() {
    use sera_tensor::MultiHeadAttention;
    let mut ps = ParamStore::new(3);
    let mha = MultiHeadAttention::new(&mut ps, "att", 4, 4, 2, false).unwrap();
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    ps.set_tensor(mha.query.weight, Tensor::zeros(&[4, 4]))
        .unwrap();
    ps.set_tensor(mha.key.weight, Tensor::zeros(&[4, 4]))
        .unwrap();
    ps.set_tensor(mha.value.weight, eye.clone()).unwrap();
    ps.set_tensor(mha.output.weight, eye).unwrap();
    let mut g = Graph::new();
    let q = g
        .constant(Tensor::from_fn(&[1, 2, 4], |i| i as f64))
        .unwrap();
    let kv = g
        .constant(Tensor::from_fn(&[1, 5, 4], |i| (i * i) as f64 * 0.01))
        .unwrap();
    let y = mha.forward(&mut g, &ps, q, kv).unwrap();
    let kvd = g.value(kv).data().to_vec();
    for c in 0..4 {
        let mean = (0..5).map(|t| kvd[t * 4 + c]).sum::<f64>() / 5.0;
        for r in 0..2 {
            assert!((g.value(y).data()[r * 4 + c] - mean).abs() < 1e-14);
        }
    }
    assert!(MultiHeadAttention::new(&mut ps, "bad", 6, 6, 4, false).is_err());
}

#[test]
fn batch_norm_eval_uses_given_statistics() {
    let mut g = Graph::new();
    let x = constant(&mut g, &[1, 2, 1, 1], &[3.0, -1.0]);
    let one = constant(&mut g, &[2], &[1.0, 1.0]);
    let zero = constant(&mut g, &[2], &[0.0, 0.0]);
    let y = g
        .batch_norm_eval(x, one, zero, &[1.0, -1.0], &[4.0, 1.0], 1e-5)
        .unwrap();
    assert!((g.value(y).data()[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    assert_eq!(g.value(y).data()[1], 0.0);
    assert!(g
        .batch_norm_eval(x, one, zero, &[0.0; 2], &[1.0; 2], 0.0)
        .is_err());
}
