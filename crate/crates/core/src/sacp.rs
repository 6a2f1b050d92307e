//! Symmetric alignment-conflict projection.
//!
//! Given two alignment losses, their gradients over the encoder parameters are
//! compared. On conflict (`s = ⟨g_a, g_m⟩ < 0`) each loss is re-weighted by a detached
//! multiple of the other:
//!
//! ```text
//! c_a = s / (‖g_m‖ + ε)    L_re_a = L_a − c_a · L_m
//! c_m = s / (‖g_a‖ + ε)    L_re_m = L_m − c_m · L_a
//! ```

use std::sync::Arc;

use diffcore::{DiffError, Float, GradientLayout, Graph, Var};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacpOutcome<T: Float = f32> {
    pub s: T,
    pub conflicted: bool,
    pub norm_a: T,
    pub norm_m: T,
    /// `(c_a, c_m)`, present iff conflicted.
    pub coefficients: Option<(T, T)>,
}

/// Applies fixed coefficients: `(L_a − c_a·L_m, L_m − c_m·L_a)`.
pub fn apply_coefficients<T: Float>(g: &mut Graph<T>, loss_a: Var, loss_m: Var, c_a: T, c_m: T) -> Result<(Var, Var)> {
    let sa = g.scale(loss_m, c_a)?;
    let re_a = g.sub(loss_a, sa)?;
    let sm = g.scale(loss_a, c_m)?;
    let re_m = g.sub(loss_m, sm)?;
    Ok((re_a, re_m))
}

/// Reformulates the pair over the parameters in `encoder`. Without conflict the
/// original nodes are returned unchanged.
pub fn sacp_reformulate<T: Float>(
    g: &mut Graph<T>,
    loss_a: Var,
    loss_m: Var,
    encoder: &Arc<GradientLayout>,
    eps: T,
) -> Result<(Var, Var, SacpOutcome<T>)> {
    if encoder.is_empty() || encoder.total() == 0 {
        return Err(Error::Diff(DiffError::EmptyParameterSet));
    }
    let g_a = g.backward(loss_a, encoder)?;
    let g_m = g.backward(loss_m, encoder)?;
    let s = g_a.dot(&g_m);
    let (norm_a, norm_m) = (g_a.norm(), g_m.norm());
    if !(s.is_finite() && norm_a.is_finite() && norm_m.is_finite()) {
        return Err(Error::Numeric("alignment gradient inner product is not finite".into()));
    }
    if s >= T::zero() {
        let outcome = SacpOutcome { s, conflicted: false, norm_a, norm_m, coefficients: None };
        return Ok((loss_a, loss_m, outcome));
    }
    let c_a = s / (norm_m + eps);
    let c_m = s / (norm_a + eps);
    let (re_a, re_m) = apply_coefficients(g, loss_a, loss_m, c_a, c_m)?;
    let outcome = SacpOutcome { s, conflicted: true, norm_a, norm_m, coefficients: Some((c_a, c_m)) };
    Ok((re_a, re_m, outcome))
}

/// Fraction of conflicted steps among the last `window` entries.
pub fn conflict_rate(history: &[bool], window: usize) -> f64 {
    let window = window.max(1);
    let tail = &history[history.len().saturating_sub(window)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().filter(|&&c| c).count() as f64 / tail.len() as f64
}
