use diffcore::{Float, Graph, ParamStore, Var};

use crate::error::{Error, Result};
use crate::nn;
use crate::tokenizer::model::{init_rng, init_stream, Stream};

pub fn head_name(stream: Stream) -> &'static str {
    match stream {
        Stream::Appearance => "align.head_a",
        Stream::Motion => "align.head_m",
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("align.")
}

/// Two-layer GELU projection `d → 2·d_t → d_t` for each stream.
pub fn init_heads(store: &mut ParamStore, d: usize, d_t: usize, seed: u64) -> Result<()> {
    for (stream, id) in [(Stream::Appearance, init_stream::HEAD_A), (Stream::Motion, init_stream::HEAD_M)] {
        let mut rng = init_rng(seed, id);
        let name = head_name(stream);
        nn::init_linear(store, &mut rng, &format!("{name}.fc1"), d, 2 * d_t)?;
        nn::init_linear(store, &mut rng, &format!("{name}.fc2"), 2 * d_t, d_t)?;
    }
    Ok(())
}

pub fn project<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, stream: Stream, e: Var) -> Result<Var> {
    let name = head_name(stream);
    let h = nn::linear(g, store, &format!("{name}.fc1"), e)?;
    let h = g.gelu(h)?;
    nn::linear(g, store, &format!("{name}.fc2"), h)
}

/// `−mean_n cos(target_n, projected_n)` over all leading axes. Targets are constants.
pub fn neg_cosine<T: Float>(g: &mut Graph<T>, projected: Var, targets: Var) -> Result<Var> {
    if g.shape(projected) != g.shape(targets) {
        return Err(Error::Invalid(format!(
            "projected features {:?} vs targets {:?}",
            g.shape(projected),
            g.shape(targets)
        )));
    }
    let targets = g.stop_gradient(targets)?;
    let cos = g.cosine_similarity(targets, projected)?;
    let m = g.mean(cos, None)?;
    Ok(g.neg(m)?)
}

/// Alignment loss of encoder features `e: [.., N, d]` against `targets: [.., N, d_t]`.
pub fn align_loss<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, stream: Stream, e: Var, targets: Var) -> Result<Var> {
    let projected = project(g, store, stream, e)?;
    neg_cosine(g, projected, targets)
}
