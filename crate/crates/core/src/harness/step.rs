//! One forward pass of the tokenizer objective, generic over precision so the same
//! graph serves training (f32) and finite-difference checks (f64).

use diffcore::{Float, Graph, ParamStore, Tensor, Var};

use crate::alignment::align_loss;
use crate::error::Result;
use crate::objective::{recon_l1, total_loss, Breakdown, LossParts, LossWeights, SacpMode};
use crate::sacp::SacpOutcome;
use crate::tokenizer::model::{decode_graph, encode_graph, Stream};
use crate::tokenizer::quantizer::quantize_graph;
use crate::tokenizer::TokenizerConfig;

pub struct StepInput<T: Float> {
    /// `[B, L_s, frame_patch_dim]`
    pub frame: Tensor<T>,
    /// `[B, L_t, tube_patch_dim]`, also the reconstruction target.
    pub tube: Tensor<T>,
    /// `[B, L_s, d_t]`; `None` leaves the appearance term out.
    pub image_targets: Option<Tensor<T>>,
    /// `[B, L_t, d_t]`; `None` leaves the motion term out.
    pub video_targets: Option<Tensor<T>>,
}

pub struct StepGraph<T: Float> {
    pub graph: Graph<T>,
    pub total: Var,
    pub breakdown: Breakdown,
    pub sacp: Option<SacpOutcome<T>>,
    pub indices: Vec<usize>,
    /// Projected latents before snapping, `[B, L, d_z]`.
    pub z_pre: Var,
    /// Unclamped decoder output in tubelet layout.
    pub recon: Var,
}

/// Weights with the terms of absent alignment targets zeroed.
pub fn effective_weights<T: Float>(weights: &LossWeights, input: &StepInput<T>) -> LossWeights {
    let mut w = weights.clone();
    if input.image_targets.is_none() {
        w.lambda_a = 0.0;
    }
    if input.video_targets.is_none() {
        w.lambda_m = 0.0;
    }
    w
}

pub fn build_step<T: Float>(
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    weights: &LossWeights,
    input: &StepInput<T>,
    sacp: SacpMode<'_, T>,
    frozen: Option<&[usize]>,
) -> Result<StepGraph<T>> {
    let mut g = Graph::new();
    let frame = g.constant(input.frame.clone())?;
    let tube = g.constant(input.tube.clone())?;
    let enc = encode_graph(&mut g, store, cfg, frame, tube)?;
    let z = g.concat(&[enc.z_a, enc.z_m], 1)?;
    let q = quantize_graph(&mut g, store, z, frozen)?;
    let recon = decode_graph(&mut g, store, cfg, q.y)?;
    let rec = recon_l1(&mut g, tube, recon)?;

    let mut align = |stream, e: Var, targets: &Option<Tensor<T>>| -> Result<Option<Var>> {
        match targets {
            Some(t) => {
                let t = g.constant(t.clone())?;
                Ok(Some(align_loss(&mut g, store, stream, e, t)?))
            }
            None => Ok(None),
        }
    };
    let align_a = align(Stream::Appearance, enc.e_a, &input.image_targets)?;
    let align_m = align(Stream::Motion, enc.e_m, &input.video_targets)?;

    let parts = LossParts {
        rec: Some(rec),
        codebook: Some(q.codebook_loss),
        commit: Some(q.commit_loss),
        align_a,
        align_m,
        aux: Vec::new(),
    };
    let w = effective_weights(weights, input);
    let out = total_loss(&mut g, &parts, &w, sacp)?;
    Ok(StepGraph {
        graph: g,
        total: out.total,
        breakdown: out.breakdown,
        sacp: out.sacp,
        indices: q.indices,
        z_pre: q.z_pre,
        recon,
    })
}
