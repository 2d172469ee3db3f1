//! Property tests for tensor invariants.

use proptest::prelude::*;
use sera_tensor::{Graph, Padding, ParamKind, ParamStore, Tensor};

fn softmax_row(vals: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::new(&[vals.len()], vals.to_vec()).unwrap())
        .unwrap();
    let s = g.softmax(x).unwrap();
    g.value(s).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let s = softmax_row(&vals);
        prop_assert!(s.iter().all(|&v| v > 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // Logits and shift on a 1/8 grid keep `x - max` exact, so the outputs
    // agree bitwise.
    #[test]
    fn softmax_shift_invariant_bitwise(
        ints in prop::collection::vec(-64i32..64, 1..10),
        shift in -256i32..256,
    ) {
        let vals: Vec<f64> = ints.iter().map(|&i| i as f64 / 8.0).collect();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift as f64 / 8.0).collect();
        let a = softmax_row(&vals);
        let b = softmax_row(&shifted);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn same_padding_preserves_spatial_size(
        h in 1usize..7, w in 1usize..7, c in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]),
        replicate in any::<bool>(),
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, c, h, w])).unwrap();
        let kern = g.constant(Tensor::ones(&[c, 1, k, k])).unwrap();
        let pad = if replicate { Padding::Replicate } else { Padding::Zero };
        let y = g.depthwise_conv(x, kern, None, pad).unwrap();
        prop_assert_eq!(g.shape(y), &[2, c, h, w]);
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut ps = ParamStore::new(seed);
            let a = ps.uniform("a", &[2, 3, 4, 4], 1.0, ParamKind::Weight).unwrap();
            let k = ps.uniform("k", &[3, 1, 3, 3], 1.0, ParamKind::Weight).unwrap();
            let mut g = Graph::new();
            let (av, kv) = (g.param(&ps, a).unwrap(), g.param(&ps, k).unwrap());
            let y = g.depthwise_conv(av, kv, None, Padding::Zero).unwrap();
            let y = g.gelu(y).unwrap();
            let p = g.global_avg_pool(y).unwrap();
            let s = g.softmax(p).unwrap();
            let q = g.square(s).unwrap();
            let l = g.sum(q).unwrap();
            g.backward(l).unwrap();
            let mut out = g.value(l).data().to_vec();
            out.extend_from_slice(g.grad(av).unwrap());
            out.extend_from_slice(g.grad(kv).unwrap());
            out
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
