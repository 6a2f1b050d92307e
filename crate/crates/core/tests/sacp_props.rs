use std::sync::Arc;

use diffcore::{GradientLayout, Graph, ParamStore, Tensor, Var};
use dera::sacp::{sacp_reformulate, SacpOutcome};
use proptest::prelude::*;

const THETA: &str = "encoder.theta";

fn store(theta: &[f64]) -> (ParamStore<f64>, Arc<GradientLayout>) {
    let mut s = ParamStore::new();
    s.insert(THETA, Tensor::new(vec![theta.len()], theta.to_vec()).unwrap()).unwrap();
    let layout = s.layout(|_| true);
    (s, layout)
}

/// `Σ c_i θ_i`: its gradient is exactly `c`.
fn linear(g: &mut Graph<f64>, theta: Var, c: &[f64]) -> Var {
    let c = g.constant(Tensor::new(vec![c.len()], c.to_vec()).unwrap()).unwrap();
    let p = g.mul(theta, c).unwrap();
    g.sum(p, None).unwrap()
}

/// `Σ exp(c_i θ_i)`: nonlinear in θ.
fn curved(g: &mut Graph<f64>, theta: Var, c: &[f64]) -> Var {
    let c = g.constant(Tensor::new(vec![c.len()], c.to_vec()).unwrap()).unwrap();
    let p = g.mul(theta, c).unwrap();
    let e = g.exp(p).unwrap();
    g.sum(e, None).unwrap()
}

struct Run {
    g: Graph<f64>,
    la: Var,
    lm: Var,
    ra: Var,
    rm: Var,
    out: SacpOutcome<f64>,
    layout: Arc<GradientLayout>,
}

fn run_linear(ga: &[f64], gm: &[f64], eps: f64) -> Run {
    let (s, layout) = store(&vec![0.5; ga.len()]);
    let mut g = Graph::new();
    let theta = g.bind(&s, THETA).unwrap();
    let la = linear(&mut g, theta, ga);
    let lm = linear(&mut g, theta, gm);
    let (ra, rm, out) = sacp_reformulate(&mut g, la, lm, &layout, eps).unwrap();
    Run { g, la, lm, ra, rm, out, layout }
}

fn grad(r: &Run, v: Var) -> Vec<f64> {
    r.g.backward(v, &r.layout).unwrap().flat().to_vec()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn orthogonal_gradients_pass_through() {
    let r = run_linear(&[1.0, 0.0], &[0.0, 1.0], 1e-8);
    assert!(!r.out.conflicted);
    assert_eq!((r.ra, r.rm), (r.la, r.lm));
    assert_close(&grad(&r, r.ra), &[1.0, 0.0], 1e-5);
    assert_close(&grad(&r, r.rm), &[0.0, 1.0], 1e-5);
}

#[test]
fn antiparallel_gradients_cancel() {
    let r = run_linear(&[1.0, 0.0], &[-1.0, 0.0], 1e-12);
    assert!(r.out.conflicted);
    let (ca, cm) = r.out.coefficients.unwrap();
    assert_close(&[ca, cm], &[-1.0, -1.0], 1e-5);
    assert_close(&grad(&r, r.ra), &[0.0, 0.0], 1e-5);
    assert_close(&grad(&r, r.rm), &[0.0, 0.0], 1e-5);
}

#[test]
fn partial_conflict_example() {
    let r = run_linear(&[1.0, 0.0], &[-1.0, 1.0], 1e-12);
    assert!(r.out.conflicted);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert_close(&grad(&r, r.ra), &[1.0 - h, h], 1e-5);
    assert_close(&grad(&r, r.rm), &[0.0, 1.0], 1e-5);
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn non_negative_inner_product_is_bitwise_pass_through(ga in vec_strategy(6), gm in vec_strategy(6)) {
        let r = run_linear(&ga, &gm, 1e-8);
        let s: f64 = grad(&r, r.la).iter().zip(grad(&r, r.lm)).map(|(a, b)| a * b).sum();
        prop_assert_eq!(r.out.conflicted, r.out.s < 0.0);
        if r.out.s >= 0.0 {
            prop_assert_eq!((r.ra, r.rm), (r.la, r.lm));
            prop_assert_eq!(r.g.scalar(r.ra).to_bits(), r.g.scalar(r.la).to_bits());
            prop_assert_eq!(r.g.scalar(r.rm).to_bits(), r.g.scalar(r.lm).to_bits());
            prop_assert!(r.out.coefficients.is_none());
        }
        prop_assert!((s - r.out.s).abs() <= 1e-9 * (1.0 + s.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reformulated_gradients_match_recomputation(
        ca in vec_strategy(5),
        cm in vec_strategy(5),
        theta in vec_strategy(5),
    ) {
        let (s, layout) = store(&theta);
        let mut g = Graph::new();
        let t = g.bind(&s, THETA).unwrap();
        let la = curved(&mut g, t, &ca);
        let lm = curved(&mut g, t, &cm);
        let (ra, rm, out) = sacp_reformulate(&mut g, la, lm, &layout, 1e-8).unwrap();
        let ga = g.backward(la, &layout).unwrap();
        let gm = g.backward(lm, &layout).unwrap();
        let (c_a, c_m) = out.coefficients.unwrap_or((0.0, 0.0));
        let got_a = g.backward(ra, &layout).unwrap();
        let got_m = g.backward(rm, &layout).unwrap();
        for i in 0..5 {
            let want_a = ga.flat()[i] - c_a * gm.flat()[i];
            let want_m = gm.flat()[i] - c_m * ga.flat()[i];
            prop_assert!((got_a.flat()[i] - want_a).abs() <= 1e-5 * (want_a.abs() + 1e-8));
            prop_assert!((got_m.flat()[i] - want_m).abs() <= 1e-5 * (want_m.abs() + 1e-8));
        }
    }

    #[test]
    fn conflict_coefficients_are_non_positive(ga in vec_strategy(6), gm in vec_strategy(6)) {
        let r = run_linear(&ga, &gm, 1e-8);
        if let Some((c_a, c_m)) = r.out.coefficients {
            prop_assert!(r.out.s < 0.0);
            prop_assert!(c_a <= 0.0 && c_m <= 0.0);
        }
    }

    #[test]
    fn swapping_inputs_swaps_outputs(ga in vec_strategy(6), gm in vec_strategy(6)) {
        let r = run_linear(&ga, &gm, 1e-8);
        let q = run_linear(&gm, &ga, 1e-8);
        prop_assert_eq!(r.out.s.to_bits(), q.out.s.to_bits());
        prop_assert_eq!(r.out.coefficients, q.out.coefficients.map(|(a, m)| (m, a)));
        prop_assert_eq!(r.g.scalar(r.ra).to_bits(), q.g.scalar(q.rm).to_bits());
        prop_assert_eq!(r.g.scalar(r.rm).to_bits(), q.g.scalar(q.ra).to_bits());
    }

    #[test]
    fn positive_rescaling_of_motion_loss(ga in vec_strategy(6), gm in vec_strategy(6), k in 0.1f64..10.0) {
        let eps = 1e-8;
        let r = run_linear(&ga, &gm, eps);
        let scaled: Vec<f64> = gm.iter().map(|x| k * x).collect();
        let q = run_linear(&ga, &scaled, eps);
        prop_assert!((q.out.s - k * r.out.s).abs() <= 1e-9 * (1.0 + (k * r.out.s).abs()));
        if let (Some((ca, _)), Some((ca_k, _))) = (r.out.coefficients, q.out.coefficients) {
            let want = k * r.out.s / (k * r.out.norm_m + eps);
            prop_assert!((ca_k - want).abs() <= 1e-9 * (1.0 + want.abs()));
            // Without ε the coefficient would be scale-free.
            prop_assert!((ca_k - ca).abs() <= 1e-6 * (1.0 + ca.abs()));
        }
    }
}
