use std::sync::Arc;

use diffcore::gradcheck::{self, grad_check, sample_point};
use diffcore::{DiffError, Graph, GradientLayout, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn layout(names: &[(&str, &[usize])]) -> Arc<GradientLayout> {
    Arc::new(GradientLayout::new(
        names.iter().map(|(n, s)| (n.to_string(), s.to_vec())).collect(),
    ))
}

#[test]
fn square_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &Tensor::scalar(3.0)).unwrap();
    let loss = g.mul(x, x).unwrap();
    let grad = g.backward(loss, &layout(&[("x", &[])])).unwrap();
    assert_eq!(grad.flat(), &[6.0]);
}

#[test]
fn elementwise_product_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.param("a", &t(&[1, 2], &[1.0, 2.0])).unwrap();
    let b = g.constant(t(&[1, 2], &[3.0, 4.0])).unwrap();
    let p = g.mul(a, b).unwrap();
    let loss = g.sum(p, None).unwrap();
    let grad = g.backward(loss, &layout(&[("a", &[1, 2])])).unwrap();
    assert_eq!(grad.get("a").unwrap(), &[3.0, 4.0]);
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = sample_point("layer_norm", &mut rng).unwrap();
    assert_eq!(point[0].shape(), &[4, 8]);
    let report = grad_check("layer_norm", &point, 1e-4).unwrap();
    assert!(report.passed(), "{:?}", report.max_rel_err);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &t(&[2], &[1.0, 2.0])).unwrap();
    let y = g.exp(x).unwrap();
    let err = g.backward(y, &layout(&[("x", &[2])])).unwrap_err();
    assert!(matches!(err, DiffError::NonScalarLoss(_)));
}

#[test]
fn unreachable_parameter_gets_zero_block() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &t(&[2], &[1.0, 2.0])).unwrap();
    let _y = g.param("y", &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let loss = g.sum(x, None).unwrap();
    let grad = g
        .backward(loss, &layout(&[("x", &[2]), ("y", &[3]), ("z", &[1])]))
        .unwrap();
    assert_eq!(grad.get("x").unwrap(), &[1.0, 1.0]);
    assert_eq!(grad.get("y").unwrap(), &[0.0; 3]);
    assert_eq!(grad.get("z").unwrap(), &[0.0]);
}

#[test]
fn nan_gradient_names_the_op() {
    // sqrt at 0 is finite forward, infinite backward.
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &t(&[2], &[0.0, 1.0])).unwrap();
    let r = g.sqrt(x).unwrap();
    let loss = g.sum(r, None).unwrap();
    match g.backward(loss, &layout(&[("x", &[2])])) {
        Err(DiffError::NonFiniteGradient { op, .. }) => assert_eq!(op, "sqrt"),
        other => panic!("expected non-finite gradient, got {other:?}"),
    }
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &t(&[1], &[-1.0])).unwrap();
    assert!(matches!(g.log(x), Err(DiffError::NonFinite { op: "log", .. })));
}

#[test]
fn backward_does_not_touch_stored_grads() {
    let mut store = ParamStore::<f64>::new();
    store.insert("a", t(&[2], &[1.0, 2.0])).unwrap();
    store.insert("b", t(&[2], &[3.0, 4.0])).unwrap();
    let lay_b = store.layout(|n| n == "b");
    let mut g = Graph::new();
    let b = g.bind(&store, "b").unwrap();
    let s = g.sum(b, None).unwrap();
    let gb = g.backward(s, &lay_b).unwrap();
    store.set_grads(&gb).unwrap();
    assert!(store.parameter("a").unwrap().grad.is_none());
    assert_eq!(store.parameter("b").unwrap().grad.as_ref().unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn stop_gradient_values_and_gradients() {
    let mut g = Graph::<f64>::new();
    let v = g.param("v", &t(&[2], &[1.5, -2.0])).unwrap();
    let sv = g.stop_gradient(v).unwrap();
    assert_eq!(g.value(sv).data(), &[1.5, -2.0]);
    let loss = g.sum(sv, None).unwrap();
    let grad = g.backward(loss, &layout(&[("v", &[2])])).unwrap();
    assert_eq!(grad.flat(), &[0.0, 0.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param("x", &Tensor::scalar(3.0)).unwrap();
    let sx = g.stop_gradient(x).unwrap();
    let loss = g.mul(sx, x).unwrap();
    let grad = g.backward(loss, &layout(&[("x", &[])])).unwrap();
    assert_eq!(grad.flat(), &[3.0]);
}

#[test]
fn straight_through_copies_value_and_routes_gradient() {
    let mut g = Graph::<f64>::new();
    let z = g.param("z", &t(&[2], &[0.3, -0.4])).unwrap();
    let e = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
    let y = g.straight_through(e, z).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    let w = g.constant(t(&[2], &[5.0, 7.0])).unwrap();
    let yw = g.mul(y, w).unwrap();
    let loss = g.sum(yw, None).unwrap();
    let grad = g.backward(loss, &layout(&[("z", &[2])])).unwrap();
    assert_eq!(grad.flat(), &[5.0, 7.0]);
}

#[test]
fn full_catalogue_passes_in_both_precisions() {
    for r in gradcheck::run_suite(10, 2024, 1e-4, false).unwrap() {
        assert!(r.passed(), "{} (f64): {:?}", r.op_id, r.max_rel_err);
    }
    for r in gradcheck::run_suite(10, 2025, 1e-2, true).unwrap() {
        assert!(r.passed(), "{} (f32): {:?}", r.op_id, r.max_rel_err);
    }
}

#[test]
fn causal_attention_ignores_future_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = sample_point("attention", &mut rng).unwrap();
    let run = |k: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let q = g.constant(base[0].clone()).unwrap();
        let k = g.constant(k.clone()).unwrap();
        let v = g.constant(base[2].clone()).unwrap();
        let m = g.constant(diffcore::causal_mask(4)).unwrap();
        let o = g.scaled_dot_product_attention(q, k, v, Some(m)).unwrap();
        g.value(o).clone()
    };
    let a = run(&base[1]);
    let mut k2 = base[1].clone();
    // Perturb key at position 3 in both batches.
    for b in 0..2 {
        for c in 0..3 {
            k2.data_mut()[b * 12 + 3 * 3 + c] += 1.0;
        }
    }
    let b = run(&k2);
    for batch in 0..2 {
        let off = batch * 12;
        assert_eq!(&a.data()[off..off + 9], &b.data()[off..off + 9]);
    }
}
