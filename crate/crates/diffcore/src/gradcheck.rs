//! Finite-difference verification of the primitive catalogue.
//!
//! Every differentiable primitive is exercised through a scalar probe
//! `loss = sum(op(inputs) ⊙ W)` with a fixed, non-uniform weight tensor `W`, and its
//! analytic gradient is compared against central differences evaluated in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::{numel, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Differentiable primitives covered by [`grad_check`]. `stop_gradient` and
/// `straight_through` deliberately disagree with finite differences and are tested
/// by their own contracts instead.
pub const CATALOGUE: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "batched_matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "concat",
    "slice",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "relu",
    "gelu",
    "abs",
    "softmax",
    "layer_norm",
    "embedding",
    "cosine_similarity",
    "cross_entropy",
    "attention",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_id: String,
    /// Max `|analytic − numeric| / (|numeric| + 1e-8)` per input tensor.
    pub max_rel_err: Vec<f64>,
    pub tol: f64,
    pub precision: &'static str,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|&e| e < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn probe_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = i as f64;
            (0.37 * x + 0.11).sin() + 0.3 * (1.3 * x).cos()
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid sample shape")
}

/// Values bounded away from 0 (for kinks and poles).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..numel(shape))
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid sample shape")
}

/// A random evaluation point for `op_id`.
pub fn sample_point(op_id: &str, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let n = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.5, 1.5);
    Ok(match op_id {
        "add" | "sub" | "mul" => vec![n(rng, &[3, 4]), n(rng, &[4])],
        "div" => vec![n(rng, &[3, 4]), away_from_zero(rng, &[3, 4], 0.5, 2.0)],
        "scale" | "sum" | "mean" | "reshape" => vec![n(rng, &[3, 4])],
        "matmul" => vec![n(rng, &[3, 4]), n(rng, &[4, 2])],
        "batched_matmul" => vec![n(rng, &[2, 3, 4]), n(rng, &[2, 4, 2])],
        "transpose" => vec![n(rng, &[2, 3, 4])],
        "broadcast_to" => vec![n(rng, &[3, 1])],
        "concat" => vec![n(rng, &[2, 3]), n(rng, &[2, 2])],
        "slice" => vec![n(rng, &[4, 5])],
        "exp" => vec![uniform(rng, &[3, 4], -2.0, 2.0)],
        "log" | "sqrt" => vec![uniform(rng, &[3, 4], 0.5, 3.0)],
        "relu" | "abs" => vec![away_from_zero(rng, &[3, 4], 0.1, 2.0)],
        "gelu" => vec![uniform(rng, &[3, 4], -3.0, 3.0)],
        "softmax" => vec![n(rng, &[7])],
        "layer_norm" => vec![n(rng, &[4, 8]), uniform(rng, &[8], 0.5, 1.5), n(rng, &[8])],
        "embedding" => vec![n(rng, &[5, 3])],
        "cosine_similarity" => vec![n(rng, &[16]), n(rng, &[16])],
        "cross_entropy" => vec![uniform(rng, &[4, 6], -2.0, 2.0)],
        "attention" => vec![n(rng, &[2, 4, 3]), n(rng, &[2, 4, 3]), n(rng, &[2, 4, 3])],
        other => return Err(DiffError::UnknownOp(other.to_string())),
    })
}

/// Applies primitive `op_id` to `inputs`.
pub fn apply<T: Float>(g: &mut Graph<T>, op_id: &str, inputs: &[Var]) -> Result<Var> {
    let arity = match op_id {
        "add" | "sub" | "mul" | "div" | "matmul" | "batched_matmul" | "concat" | "cosine_similarity" => 2,
        "layer_norm" | "attention" => 3,
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(DiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("`{op_id}` takes {arity} inputs, got {}", inputs.len()),
        });
    }
    let x = inputs[0];
    match op_id {
        "add" => g.add(x, inputs[1]),
        "sub" => g.sub(x, inputs[1]),
        "mul" => g.mul(x, inputs[1]),
        "div" => g.div(x, inputs[1]),
        "scale" => g.scale(x, T::from_f64(1.7)),
        "matmul" | "batched_matmul" => g.matmul(x, inputs[1]),
        "transpose" => g.permute(x, &[2, 0, 1]),
        "reshape" => {
            let n = g.value(x).numel();
            g.reshape(x, &[2, n / 2])
        }
        "broadcast_to" => g.broadcast_to(x, &[2, 3, 4]),
        "concat" => g.concat(&[x, inputs[1]], 1),
        "slice" => g.slice(x, 1, 1, 3),
        "sum" => g.sum(x, Some(0)),
        "mean" => g.mean(x, Some(1)),
        "exp" => g.exp(x),
        "log" => g.log(x),
        "sqrt" => g.sqrt(x),
        "relu" => g.relu(x),
        "gelu" => g.gelu(x),
        "abs" => g.abs(x),
        "softmax" => g.softmax(x),
        "layer_norm" => g.layer_norm(x, inputs[1], inputs[2]),
        "embedding" => g.embedding(x, &[1, 0, 3, 1, 4, 1], &[2, 3]),
        "cosine_similarity" => g.cosine_similarity(x, inputs[1]),
        "cross_entropy" => {
            let rows = g.value(x).numel() / g.shape(x)[1];
            let v = g.shape(x)[1];
            let targets: Vec<usize> = (0..rows).map(|r| (r * 5 + 2) % v).collect();
            let mask: Vec<bool> = (0..rows).map(|r| r != 2).collect();
            g.cross_entropy(x, &targets, Some(&mask))
        }
        "attention" => g.scaled_dot_product_attention(x, inputs[1], inputs[2], None),
        other => Err(DiffError::UnknownOp(other.to_string())),
    }
}

/// Builds `sum(op(inputs) ⊙ W)` and returns (graph, input leaves, loss).
fn probe<T: Float>(op_id: &str, point: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)> {
    let mut g = Graph::<T>::new();
    let inputs = point
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("in{i}"), t))
        .collect::<Result<Vec<_>>>()?;
    let out = apply(&mut g, op_id, &inputs)?;
    let shape = g.shape(out).to_vec();
    let w = Tensor::from_f64(shape, &probe_weights(g.value(out).numel()))?;
    let w = g.constant(w)?;
    let weighted = g.mul(out, w)?;
    let loss = g.sum(weighted, None)?;
    Ok((g, inputs, loss))
}

fn probe_value(op_id: &str, point: &[Tensor<f64>]) -> Result<f64> {
    let (g, _, loss) = probe(op_id, point)?;
    Ok(g.scalar(loss))
}

/// Central-difference gradient of the probe at `point`, in `f64`.
pub fn numeric_gradient(op_id: &str, point: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut grad = Vec::with_capacity(point[i].numel());
        for j in 0..point[i].numel() {
            let mut p = point.to_vec();
            let x0 = p[i].data()[j];
            p[i].data_mut()[j] = x0 + FD_STEP;
            let up = probe_value(op_id, &p)?;
            p[i].data_mut()[j] = x0 - FD_STEP;
            let down = probe_value(op_id, &p)?;
            grad.push((up - down) / (2.0 * FD_STEP));
        }
        out.push(Tensor::new(point[i].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Analytic gradient of the probe, computed in precision `T`.
pub fn analytic_gradient<T: Float>(op_id: &str, point: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let cast: Vec<Tensor<T>> = point.iter().map(Tensor::cast).collect();
    let (g, inputs, loss) = probe(op_id, &cast)?;
    Ok(g.backward_vars(loss, &inputs)?.iter().map(Tensor::cast).collect())
}

/// `max |a − n| / (|n| + 1e-8)` over the elements of one input.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

fn check_in<T: Float>(op_id: &str, point: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport> {
    if !CATALOGUE.contains(&op_id) {
        return Err(DiffError::UnknownOp(op_id.to_string()));
    }
    // Evaluate the numeric side at exactly the point the analytic side sees.
    let rounded: Vec<Tensor<f64>> = point.iter().map(|t| t.cast::<T>().cast::<f64>()).collect();
    let analytic = analytic_gradient::<T>(op_id, &rounded)?;
    let numeric = numeric_gradient(op_id, &rounded)?;
    Ok(GradCheckReport {
        op_id: op_id.to_string(),
        max_rel_err: analytic.iter().zip(&numeric).map(|(a, n)| max_relative_error(a, n)).collect(),
        tol,
        precision: T::NAME,
    })
}

/// Compares the 64-bit analytic gradient of `op_id` at `point` with central
/// differences. Exceeding `tol` yields a failing report, not an error.
pub fn grad_check(op_id: &str, point: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport> {
    check_in::<f64>(op_id, point, tol)
}

/// As [`grad_check`], with the analytic side computed in 32-bit.
pub fn grad_check_f32(op_id: &str, point: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport> {
    check_in::<f32>(op_id, point, tol)
}

/// Runs every catalogue entry at `points` random points, returning the worst report
/// per primitive, in 32-bit when `single_precision` is set.
pub fn run_suite(points: usize, seed: u64, tol: f64, single_precision: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(CATALOGUE.len());
    for op in CATALOGUE {
        let mut worst: Option<GradCheckReport> = None;
        for _ in 0..points {
            let point = sample_point(op, &mut rng)?;
            let r = if single_precision {
                grad_check_f32(op, &point, tol)?
            } else {
                grad_check(op, &point, tol)?
            };
            if worst.as_ref().is_none_or(|w| r.worst() > w.worst()) {
                worst = Some(r);
            }
        }
        reports.extend(worst);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_an_error() {
        let p = vec![Tensor::<f64>::zeros(&[2])];
        assert!(matches!(grad_check("frobnicate", &p, 1e-4), Err(DiffError::UnknownOp(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_point("frobnicate", &mut rng).is_err());
    }

    #[test]
    fn named_examples_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for op in ["matmul", "softmax", "cosine_similarity"] {
            let point = sample_point(op, &mut rng).unwrap();
            let r = grad_check(op, &point, 1e-4).unwrap();
            assert!(r.passed(), "{op}: {:?}", r.max_rel_err);
        }
    }

    #[test]
    fn exceeding_tolerance_is_a_failing_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = sample_point("exp", &mut rng).unwrap();
        let r = grad_check("exp", &point, 0.0).unwrap();
        assert!(!r.passed());
    }
}
