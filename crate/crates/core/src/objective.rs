//! Assembly of the tokenizer training loss from its parts.

use std::collections::BTreeMap;
use std::sync::Arc;

use diffcore::{Float, GradientLayout, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sacp::{self, SacpOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_m: f64,
    /// Commitment weight inside the VQ term.
    pub beta: f64,
    pub w_rec: f64,
    /// Weights of named auxiliary terms; a term with no weight entry is ignored.
    #[serde(default)]
    pub aux: BTreeMap<String, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_a: 1.0, lambda_m: 0.5, beta: 0.25, w_rec: 1.0, aux: BTreeMap::new() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_a, self.lambda_m, self.beta, self.w_rec].into_iter().chain(self.aux.values().copied());
        for w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weights must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn recon_l1<T: Float>(g: &mut Graph<T>, x: Var, x_r: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_r) {
        return Err(Error::Invalid(format!("recon shapes {:?} vs {:?}", g.shape(x), g.shape(x_r))));
    }
    let d = g.sub(x_r, x)?;
    let a = g.abs(d)?;
    Ok(g.mean(a, None)?)
}

/// `mean((sg(z) − e)²) + β·mean((z − sg(e))²)`.
pub fn vq_objective<T: Float>(g: &mut Graph<T>, z_pre: Var, e: Var, beta: T) -> Result<Var> {
    if g.shape(z_pre) != g.shape(e) {
        return Err(Error::Invalid(format!("vq shapes {:?} vs {:?}", g.shape(z_pre), g.shape(e))));
    }
    let (z_sg, e_sg) = (g.stop_gradient(z_pre)?, g.stop_gradient(e)?);
    let d = g.sub(z_sg, e)?;
    let codebook = g.mean_square(d)?;
    let d = g.sub(z_pre, e_sg)?;
    let commit = g.mean_square(d)?;
    let commit = g.scale(commit, beta)?;
    Ok(g.add(codebook, commit)?)
}

/// Scalar loss nodes for one step.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub rec: Option<Var>,
    pub codebook: Option<Var>,
    pub commit: Option<Var>,
    pub align_a: Option<Var>,
    pub align_m: Option<Var>,
    pub aux: Vec<(String, Var)>,
}

pub enum SacpMode<'a, T: Float> {
    Off,
    On { encoder: &'a Arc<GradientLayout>, eps: T },
    /// Reuse coefficients from an earlier evaluation; `None` means no conflict.
    Frozen(Option<(T, T)>),
}

/// Term values of an assembled loss. `re_a`/`re_m` are the alignment terms that
/// actually entered the total (equal to `align_a`/`align_m` without conflict).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Breakdown {
    pub total: f64,
    pub rec: f64,
    pub vq: f64,
    pub align_a: Option<f64>,
    pub align_m: Option<f64>,
    pub re_a: Option<f64>,
    pub re_m: Option<f64>,
    pub aux: Vec<(String, f64)>,
}

impl Breakdown {
    /// The total recomputed from the terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let mut s = w.w_rec * self.rec + self.vq;
        s += self.re_a.map_or(0.0, |v| w.lambda_a * v);
        s += self.re_m.map_or(0.0, |v| w.lambda_m * v);
        for (name, v) in &self.aux {
            s += w.aux.get(name).copied().unwrap_or(0.0) * v;
        }
        s
    }
}

pub struct Assembled<T: Float> {
    pub total: Var,
    pub breakdown: Breakdown,
    pub sacp: Option<SacpOutcome<T>>,
}

fn weighted<T: Float>(g: &mut Graph<T>, acc: Option<Var>, term: Var, w: f64) -> Result<Option<Var>> {
    let t = g.scale(term, T::from_f64(w))?;
    Ok(Some(match acc {
        Some(a) => g.add(a, t)?,
        None => t,
    }))
}

/// `w_rec·L_rec + L_vq + λ_a·L_a' + λ_m·L_m' + Σ aux`, where the primed alignment
/// terms are SACP-reformulated when both are present and SACP is enabled.
pub fn total_loss<T: Float>(g: &mut Graph<T>, parts: &LossParts, weights: &LossWeights, mode: SacpMode<'_, T>) -> Result<Assembled<T>> {
    let need = |v: Option<Var>, what: &str| v.ok_or_else(|| Error::Invalid(format!("missing loss part: {what}")));
    let rec = need(parts.rec, "reconstruction")?;
    let codebook = need(parts.codebook, "codebook")?;
    let commit = need(parts.commit, "commitment")?;
    if weights.lambda_a > 0.0 && parts.align_a.is_none() {
        return Err(Error::Invalid("missing loss part: appearance alignment".into()));
    }
    if weights.lambda_m > 0.0 && parts.align_m.is_none() {
        return Err(Error::Invalid("missing loss part: motion alignment".into()));
    }

    let mut total = weighted(g, None, rec, weights.w_rec)?;
    let beta_commit = g.scale(commit, T::from_f64(weights.beta))?;
    let vq = g.add(codebook, beta_commit)?;
    total = Some(g.add(total.expect("rec term"), vq)?);

    let (mut re_a, mut re_m, mut outcome) = (parts.align_a, parts.align_m, None);
    if let (Some(a), Some(m)) = (parts.align_a, parts.align_m) {
        match mode {
            SacpMode::Off => {}
            SacpMode::On { encoder, eps } => {
                let (ra, rm, o) = sacp::sacp_reformulate(g, a, m, encoder, eps)?;
                (re_a, re_m, outcome) = (Some(ra), Some(rm), Some(o));
            }
            SacpMode::Frozen(Some((c_a, c_m))) => {
                let (ra, rm) = sacp::apply_coefficients(g, a, m, c_a, c_m)?;
                (re_a, re_m) = (Some(ra), Some(rm));
            }
            SacpMode::Frozen(None) => {}
        }
    }
    if let Some(a) = re_a {
        total = weighted(g, total, a, weights.lambda_a)?;
    }
    if let Some(m) = re_m {
        total = weighted(g, total, m, weights.lambda_m)?;
    }
    let mut aux = Vec::new();
    for (name, v) in &parts.aux {
        if let Some(&w) = weights.aux.get(name) {
            total = weighted(g, total, *v, w)?;
        }
        aux.push((name.clone(), g.scalar(*v).as_f64()));
    }
    let total = total.expect("at least the reconstruction term");
    let val = |v: Option<Var>| v.map(|v| g.scalar(v).as_f64());
    let breakdown = Breakdown {
        total: g.scalar(total).as_f64(),
        rec: g.scalar(rec).as_f64(),
        vq: g.scalar(vq).as_f64(),
        align_a: val(parts.align_a),
        align_m: val(parts.align_m),
        re_a: val(re_a),
        re_m: val(re_m),
        aux,
    };
    Ok(Assembled { total, breakdown, sacp: outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::Tensor;

    fn scalar(g: &mut Graph<f64>, v: f64) -> Var {
        g.constant(Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![4], vec![0.1, -0.2, 0.3, -0.4]).unwrap()).unwrap();
        let l = recon_l1(&mut g, x, x).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let y = g.add_scalar(x, 0.5).unwrap();
        let l = recon_l1(&mut g, x, y).unwrap();
        assert!((g.scalar(l) - 0.5).abs() < 1e-15);
        let bad = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(recon_l1(&mut g, x, bad).is_err());
    }

    #[test]
    fn vq_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.param("z", &Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap()).unwrap();
        let zero = vq_objective(&mut g, z, z, 0.25).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
        let e = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
        let pure = vq_objective(&mut g, z, e, 0.0).unwrap();
        let d = g.sub(z, e).unwrap();
        let ms = g.mean_square(d).unwrap();
        assert_eq!(g.scalar(pure), g.scalar(ms));
    }

    #[test]
    fn default_weights_combine_linearly() {
        let mut g = Graph::<f64>::new();
        let parts = LossParts {
            rec: Some(scalar(&mut g, 0.3)),
            codebook: Some(scalar(&mut g, 0.2)),
            commit: Some(scalar(&mut g, 0.4)),
            align_a: Some(scalar(&mut g, -0.6)),
            align_m: Some(scalar(&mut g, -0.7)),
            aux: vec![],
        };
        let w = LossWeights::default();
        let out = total_loss(&mut g, &parts, &w, SacpMode::Off).unwrap();
        let expect = 1.0 * -0.6 + 0.5 * -0.7 + 0.3 + 0.2 + 0.25 * 0.4;
        assert!((out.breakdown.total - expect).abs() < 1e-12);
        assert!((out.breakdown.weighted_sum(&w) - out.breakdown.total).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_only() {
        let mut g = Graph::<f64>::new();
        let parts = LossParts {
            rec: Some(scalar(&mut g, 0.3)),
            codebook: Some(scalar(&mut g, 0.0)),
            commit: Some(scalar(&mut g, 0.0)),
            ..Default::default()
        };
        let w = LossWeights { lambda_a: 0.0, lambda_m: 0.0, beta: 0.0, w_rec: 1.0, aux: Default::default() };
        let out = total_loss(&mut g, &parts, &w, SacpMode::Off).unwrap();
        assert_eq!(out.breakdown.total, 0.3);
    }

    #[test]
    fn missing_parts_are_errors() {
        let mut g = Graph::<f64>::new();
        let parts = LossParts { rec: Some(scalar(&mut g, 0.3)), ..Default::default() };
        assert!(total_loss(&mut g, &parts, &LossWeights::default(), SacpMode::Off).is_err());
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights { lambda_m: -0.1, ..Default::default() };
        assert!(w.validate().is_err());
    }
}
