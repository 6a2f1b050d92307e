use std::sync::Arc;

use diffcore::{Graph, GradientLayout, Tensor, Var};
use proptest::prelude::*;

fn layout() -> Arc<GradientLayout> {
    Arc::new(GradientLayout::new(vec![
        ("w1".into(), vec![3, 4]),
        ("w2".into(), vec![4, 2]),
    ]))
}

/// Two scalar losses sharing parameters: L1 = sum(gelu(x·w1)·w2), L2 = mean(exp(x·w1)·…).
fn build(x: &[f64], w1: &[f64], w2: &[f64]) -> (Graph<f64>, Var, Var, Var) {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2, 3], x.to_vec()).unwrap()).unwrap();
    let w1 = g.param("w1", &Tensor::new(vec![3, 4], w1.to_vec()).unwrap()).unwrap();
    let w2 = g.param("w2", &Tensor::new(vec![4, 2], w2.to_vec()).unwrap()).unwrap();
    let h = g.matmul(x, w1).unwrap();
    let a = g.gelu(h).unwrap();
    let o = g.matmul(a, w2).unwrap();
    let l1 = g.sum(o, None).unwrap();
    let sm = g.softmax(h).unwrap();
    let sq = g.mul(sm, sm).unwrap();
    let l2 = g.mean(sq, None).unwrap();
    (g, w1, l1, l2)
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(x in vals(6), w1 in vals(12), w2 in vals(8), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (mut g, _, l1, l2) = build(&x, &w1, &w2);
        let s1 = g.scale(l1, a).unwrap();
        let s2 = g.scale(l2, b).unwrap();
        let combo = g.add(s1, s2).unwrap();
        let lay = layout();
        let g1 = g.backward(l1, &lay).unwrap();
        let g2 = g.backward(l2, &lay).unwrap();
        let gc = g.backward(combo, &lay).unwrap();
        for i in 0..gc.flat().len() {
            let expect = a * g1.flat()[i] + b * g2.flat()[i];
            let err = (gc.flat()[i] - expect).abs() / (expect.abs() + 1e-8);
            prop_assert!(err < 1e-6 || (gc.flat()[i] - expect).abs() < 1e-12, "i={i}: {} vs {expect}", gc.flat()[i]);
        }
    }

    #[test]
    fn repeated_backward_matches_fresh_runs(x in vals(6), w1 in vals(12), w2 in vals(8)) {
        let lay = layout();
        let (g, _, l1, l2) = build(&x, &w1, &w2);
        let a1 = g.backward(l1, &lay).unwrap();
        let a2 = g.backward(l2, &lay).unwrap();
        let (g, _, l1, _) = build(&x, &w1, &w2);
        let b1 = g.backward(l1, &lay).unwrap();
        let (g, _, _, l2) = build(&x, &w1, &w2);
        let b2 = g.backward(l2, &lay).unwrap();
        prop_assert_eq!(a1.flat(), b1.flat());
        prop_assert_eq!(a2.flat(), b2.flat());
    }

    #[test]
    fn detached_branch_contributes_nothing(x in vals(6), w1 in vals(12), w2 in vals(8), c in -2.0f64..2.0) {
        // loss = L1 + c·sg(L2)·L2' where sg(L2) is detached: gradient must equal that of
        // L1 + c·value(L2)·L2', with value(L2) a constant.
        let lay = layout();
        let (mut g, _, l1, l2) = build(&x, &w1, &w2);
        let sg = g.stop_gradient(l2).unwrap();
        let prod = g.mul(sg, l1).unwrap();
        let scaled = g.scale(prod, c).unwrap();
        let loss = g.add(l1, scaled).unwrap();
        let got = g.backward(loss, &lay).unwrap();

        let (mut h, _, m1, m2) = build(&x, &w1, &w2);
        let k = h.constant(h.value(m2).clone()).unwrap();
        let prod = h.mul(k, m1).unwrap();
        let scaled = h.scale(prod, c).unwrap();
        let loss = h.add(m1, scaled).unwrap();
        let want = h.backward(loss, &lay).unwrap();
        prop_assert_eq!(got.flat(), want.flat());
    }

    #[test]
    fn argmin_rows_matches_scan(rows in vals(5 * 3), table in vals(6 * 3)) {
        let r = Tensor::new(vec![5, 3], rows.clone()).unwrap();
        let t = Tensor::new(vec![6, 3], table.clone()).unwrap();
        let idx = diffcore::argmin_rows(&r, &t).unwrap();
        for (i, &k) in idx.iter().enumerate() {
            let d = |j: usize| (0..3).map(|c| (rows[i * 3 + c] - table[j * 3 + c]).powi(2)).sum::<f64>();
            for j in 0..6 {
                prop_assert!(d(k) < d(j) || (d(k) == d(j) && k <= j));
            }
        }
    }
}
