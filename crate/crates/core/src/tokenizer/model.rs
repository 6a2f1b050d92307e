//! Dual-stream encoder, quantizer and query decoder.
//!
//! Both streams run through one shared stack of encoder blocks: the appearance stream
//! sees `[Q_a ∥ frame-0 patches]`, the motion stream `[Q_m ∥ tubelets]`. The decoder
//! reads `[Q_d ∥ codes]` and its first `L_t` outputs become tubelets again.

use diffcore::{Float, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TokenizerConfig;
use super::patchify::{patchify_frame, patchify_video, unpatchify_video};
use super::quantizer::{self, QuantVars, CODEBOOK, PROJ_IN};
use super::tokens::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{self, INIT_STD};
use crate::videolab::VideoClip;

/// RNG stream ids for parameter initialization, one per module.
pub(crate) mod init_stream {
    pub const ENCODER: u64 = 1;
    pub const QUANTIZER: u64 = 2;
    pub const DECODER: u64 = 3;
    pub const HEAD_A: u64 = 4;
    pub const HEAD_M: u64 = 5;
}

pub(crate) fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Appearance,
    Motion,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Appearance => "a",
            Stream::Motion => "m",
        }
    }
}

pub fn init_params(cfg: &TokenizerConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d;
    let mut store = ParamStore::new();

    let mut rng = init_rng(seed, init_stream::ENCODER);
    for (stream, queries, patches, patch_dim) in [
        (Stream::Appearance, cfg.l_a, cfg.l_s(), cfg.frame_patch_dim()),
        (Stream::Motion, cfg.l_m, cfg.l_t(), cfg.tube_patch_dim()),
    ] {
        let s = stream.tag();
        nn::init_linear(&mut store, &mut rng, &format!("encoder.patch_embed_{s}"), patch_dim, d)?;
        store.insert(format!("encoder.query_{s}"), nn::normal_tensor(&mut rng, &[queries, d], INIT_STD))?;
        store.insert(format!("encoder.pos_query_{s}"), nn::normal_tensor(&mut rng, &[queries, d], INIT_STD))?;
        store.insert(format!("encoder.pos_patch_{s}"), nn::normal_tensor(&mut rng, &[patches, d], INIT_STD))?;
    }
    for i in 0..cfg.n_layers {
        nn::init_block(&mut store, &mut rng, &format!("encoder.block{i}"), d)?;
    }
    nn::init_layer_norm(&mut store, "encoder.ln_f", d)?;

    let mut rng = init_rng(seed, init_stream::QUANTIZER);
    nn::init_linear(&mut store, &mut rng, PROJ_IN, d, cfg.d_z)?;
    // Matches the spread of projected layer-normed rows.
    let code_std = INIT_STD * (d as f64).sqrt();
    store.insert(CODEBOOK, nn::normal_tensor(&mut rng, &[cfg.k, cfg.d_z], code_std))?;

    let mut rng = init_rng(seed, init_stream::DECODER);
    // Lifted codes must outweigh the positional terms or the decoder learns to ignore them.
    nn::init_linear_fan_in(&mut store, &mut rng, "decoder.proj_in", cfg.d_z, d)?;
    store.insert("decoder.query", nn::normal_tensor(&mut rng, &[cfg.l_t(), d], INIT_STD))?;
    store.insert("decoder.pos_query", nn::normal_tensor(&mut rng, &[cfg.l_t(), d], INIT_STD))?;
    store.insert("decoder.pos_code", nn::normal_tensor(&mut rng, &[cfg.seq_len(), d], INIT_STD))?;
    for i in 0..cfg.n_layers {
        nn::init_block(&mut store, &mut rng, &format!("decoder.block{i}"), d)?;
    }
    nn::init_layer_norm(&mut store, "decoder.ln_f", d)?;
    nn::init_linear(&mut store, &mut rng, "decoder.pixel_head", d, cfg.tube_patch_dim())?;
    Ok(store)
}

/// Whether `name` belongs to the tokenizer proper (as opposed to training-only heads).
pub fn is_tokenizer_param(name: &str) -> bool {
    ["encoder.", "quantizer.", "decoder."].iter().any(|p| name.starts_with(p))
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Graph handles of one encoder pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct EncodeVars {
    /// `[B, L_a, d]`
    pub z_a: Var,
    /// `[B, L_m, d]`
    pub z_m: Var,
    /// `[B, L_s, d]` residual stream after block `align_depth`.
    pub e_a: Var,
    /// `[B, L_t, d]`
    pub e_m: Var,
}

fn encode_stream<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    stream: Stream,
    patches: Var,
) -> Result<(Var, Var)> {
    let s = stream.tag();
    let batch = g.shape(patches)[0];
    let n_patches = g.shape(patches)[1];
    let n_queries = match stream {
        Stream::Appearance => cfg.l_a,
        Stream::Motion => cfg.l_m,
    };
    let emb = nn::linear(g, store, &format!("encoder.patch_embed_{s}"), patches)?;
    let pos = g.bind(store, &format!("encoder.pos_patch_{s}"))?;
    let emb = g.add(emb, pos)?;
    let q = g.bind(store, &format!("encoder.query_{s}"))?;
    let qp = g.bind(store, &format!("encoder.pos_query_{s}"))?;
    let q = g.add(q, qp)?;
    let q = nn::batched(g, q, batch)?;
    let mut x = g.concat(&[q, emb], 1)?;
    let mut at_depth = None;
    for i in 0..cfg.n_layers {
        x = nn::block(g, store, &format!("encoder.block{i}"), x, cfg.n_heads, None)?;
        if i + 1 == cfg.align_depth {
            at_depth = Some(g.slice(x, 1, n_queries, n_patches)?);
        }
    }
    let x = nn::layer_norm(g, store, "encoder.ln_f", x)?;
    let z = g.slice(x, 1, 0, n_queries)?;
    let e = at_depth.ok_or_else(|| Error::Config(format!("align_depth {} beyond encoder", cfg.align_depth)))?;
    Ok((z, e))
}

/// Runs both streams. `frame_patches: [B, L_s, p·p·3]`, `tube_patches: [B, L_t, t·p·p·3]`.
pub fn encode_graph<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    frame_patches: Var,
    tube_patches: Var,
) -> Result<EncodeVars> {
    let (z_a, e_a) = encode_stream(g, store, cfg, Stream::Appearance, frame_patches)?;
    let (z_m, e_m) = encode_stream(g, store, cfg, Stream::Motion, tube_patches)?;
    Ok(EncodeVars { z_a, z_m, e_a, e_m })
}

/// Decodes `y: [B, L, d_z]` into tubelet predictions `[B, L_t, t·p·p·3]` (unclamped).
pub fn decode_graph<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TokenizerConfig, y: Var) -> Result<Var> {
    let batch = g.shape(y)[0];
    let codes = nn::linear(g, store, "decoder.proj_in", y)?;
    let pos = g.bind(store, "decoder.pos_code")?;
    let codes = g.add(codes, pos)?;
    let q = g.bind(store, "decoder.query")?;
    let qp = g.bind(store, "decoder.pos_query")?;
    let q = g.add(q, qp)?;
    let q = nn::batched(g, q, batch)?;
    let mut x = g.concat(&[q, codes], 1)?;
    for i in 0..cfg.n_layers {
        x = nn::block(g, store, &format!("decoder.block{i}"), x, cfg.n_heads, None)?;
    }
    let x = nn::layer_norm(g, store, "decoder.ln_f", x)?;
    let x = g.slice(x, 1, 0, cfg.l_t())?;
    nn::linear(g, store, "decoder.pixel_head", x)
}

/// Stacked frame and tubelet patches of a batch of clips.
pub fn batch_patches(cfg: &TokenizerConfig, clips: &[&VideoClip]) -> Result<(Tensor, Tensor)> {
    let mut frame = Vec::new();
    let mut tube = Vec::new();
    for clip in clips {
        if (clip.frames, clip.height, clip.width) != (cfg.frames, cfg.height, cfg.width) {
            return Err(Error::Invalid(format!(
                "clip is {}x{}x{}, tokenizer expects {}x{}x{}",
                clip.frames, clip.height, clip.width, cfg.frames, cfg.height, cfg.width
            )));
        }
        frame.extend_from_slice(patchify_frame(clip, cfg.p)?.data());
        tube.extend_from_slice(patchify_video(clip, cfg.t, cfg.p)?.data());
    }
    let b = clips.len();
    Ok((
        Tensor::new(vec![b, cfg.l_s(), cfg.frame_patch_dim()], frame)?,
        Tensor::new(vec![b, cfg.l_t(), cfg.tube_patch_dim()], tube)?,
    ))
}

/// Per-clip encoder output with the batch axis removed.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z_a: Tensor,
    pub z_m: Tensor,
    pub e_a_at_depth: Tensor,
    pub e_m_at_depth: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutput {
    /// Code vectors `[L, d_z]`, exact rows of the codebook.
    pub y: Tensor,
    pub indices: Vec<usize>,
    pub codebook_loss: f32,
    pub commit_loss: f32,
}

fn unbatch(t: &Tensor) -> Result<Tensor> {
    Ok(t.clone().reshape(t.shape()[1..].to_vec())?)
}

/// Inference wrapper over trained tokenizer weights.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Keeps only tokenizer weights from `params`, checking every expected name exists.
    pub fn from_params(config: TokenizerConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, 0)?;
        let mut store = ParamStore::new();
        for p in reference.iter() {
            let v = params
                .get(&p.name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Invalid(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            store.insert(p.name.clone(), v.clone())?;
        }
        Ok(Self { config, params: store })
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<EncoderOutput> {
        let (fp, tp) = batch_patches(&self.config, &[clip])?;
        let mut g = Graph::new();
        let fp = g.constant(fp)?;
        let tp = g.constant(tp)?;
        let v = encode_graph(&mut g, &self.params, &self.config, fp, tp)?;
        Ok(EncoderOutput {
            z_a: unbatch(g.value(v.z_a))?,
            z_m: unbatch(g.value(v.z_m))?,
            e_a_at_depth: unbatch(g.value(v.e_a))?,
            e_m_at_depth: unbatch(g.value(v.e_m))?,
        })
    }

    /// Quantizes `z: [L, d]` rows.
    pub fn quantize(&self, z: &Tensor) -> Result<QuantizeOutput> {
        if z.rank() != 2 || z.shape()[1] != self.config.d {
            return Err(Error::Invalid(format!("quantize expects [L, {}], got {:?}", self.config.d, z.shape())));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone().reshape(vec![1, z.shape()[0], z.shape()[1]])?)?;
        let q: QuantVars = quantizer::quantize_graph(&mut g, &self.params, zv, None)?;
        Ok(QuantizeOutput {
            y: unbatch(g.value(q.y))?,
            indices: q.indices,
            codebook_loss: g.scalar(q.codebook_loss),
            commit_loss: g.scalar(q.commit_loss),
        })
    }

    /// Decodes code vectors `y: [L, d_z]` to a clip clamped into [−1, 1].
    pub fn decode(&self, y: &Tensor) -> Result<VideoClip> {
        let cfg = &self.config;
        if y.shape() != [cfg.seq_len(), cfg.d_z] {
            return Err(Error::Invalid(format!(
                "decode expects [{}, {}], got {:?}",
                cfg.seq_len(),
                cfg.d_z,
                y.shape()
            )));
        }
        let mut g = Graph::new();
        let yv = g.constant(y.clone().reshape(vec![1, cfg.seq_len(), cfg.d_z])?)?;
        let out = decode_graph(&mut g, &self.params, cfg, yv)?;
        self.patches_to_clip(g.value(out).data())
    }

    pub(crate) fn patches_to_clip(&self, patches: &[f32]) -> Result<VideoClip> {
        let cfg = &self.config;
        let px = unpatchify_video(patches, cfg.frames, cfg.height, cfg.width, cfg.t, cfg.p)?;
        VideoClip::clamped(cfg.frames, cfg.height, cfg.width, px, None)
    }

    /// Concatenates `Z_a ∥ Z_m` as the quantizer input.
    fn joint_latents(&self, enc: &EncoderOutput) -> Result<Tensor> {
        let mut data = enc.z_a.data().to_vec();
        data.extend_from_slice(enc.z_m.data());
        Ok(Tensor::new(vec![self.config.seq_len(), self.config.d], data)?)
    }

    pub fn tokenize(&self, clip: &VideoClip) -> Result<TokenSequence> {
        let enc = self.encode(clip)?;
        let q = self.quantize(&self.joint_latents(&enc)?)?;
        TokenSequence::new(q.indices.iter().map(|&i| i as u32).collect(), self.config.l_a, self.config.l_m)
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<VideoClip> {
        if (seq.l_a, seq.l_m) != (self.config.l_a, self.config.l_m) {
            return Err(Error::Invalid(format!(
                "sequence layout {}+{} does not match tokenizer {}+{}",
                seq.l_a, seq.l_m, self.config.l_a, self.config.l_m
            )));
        }
        let book = self.params.get(CODEBOOK).expect("tokenizer has a codebook");
        let d_z = self.config.d_z;
        let mut y = Vec::with_capacity(seq.len() * d_z);
        for &ix in seq.indices() {
            let ix = ix as usize;
            if ix >= self.config.k {
                return Err(Error::Invalid(format!("token {ix} outside codebook of {}", self.config.k)));
            }
            y.extend_from_slice(book.row(ix));
        }
        self.decode(&Tensor::new(vec![seq.len(), d_z], y)?)
    }

    /// `decode(quantize(encode(clip)))`.
    pub fn reconstruct(&self, clip: &VideoClip) -> Result<VideoClip> {
        let enc = self.encode(clip)?;
        let q = self.quantize(&self.joint_latents(&enc)?)?;
        self.decode(&q.y)
    }

    /// Reconstructions and token indices for many clips, `chunk` clips per graph.
    pub fn reconstruct_many(&self, clips: &[VideoClip], chunk: usize) -> Result<(Vec<VideoClip>, Vec<usize>)> {
        let cfg = &self.config;
        let mut recon = Vec::with_capacity(clips.len());
        let mut indices = Vec::with_capacity(clips.len() * cfg.seq_len());
        for part in clips.chunks(chunk.max(1)) {
            let refs: Vec<&VideoClip> = part.iter().collect();
            let (fp, tp) = batch_patches(cfg, &refs)?;
            let mut g = Graph::new();
            let fp = g.constant(fp)?;
            let tp = g.constant(tp)?;
            let e = encode_graph(&mut g, &self.params, cfg, fp, tp)?;
            let z = g.concat(&[e.z_a, e.z_m], 1)?;
            let q = quantizer::quantize_graph(&mut g, &self.params, z, None)?;
            let out = decode_graph(&mut g, &self.params, cfg, q.y)?;
            let per = cfg.l_t() * cfg.tube_patch_dim();
            for (i, clip) in part.iter().enumerate() {
                let mut r = self.patches_to_clip(&g.value(out).data()[i * per..(i + 1) * per])?;
                r.class_label = clip.class_label;
                recon.push(r);
            }
            indices.extend_from_slice(&q.indices);
        }
        Ok((recon, indices))
    }
}
