use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::quantizer::{histogram, perplexity, usage_fraction};
use crate::tokenizer::{swap_tokens, Factor, Tokenizer};
use crate::videolab::dataset::{nearest_palette, DIRECTIONS};
use crate::videolab::{save_clip, VideoClip, PALETTE};

pub const PSNR_CAP: f64 = 99.0;

/// PSNR on `[-1, 1]` pixels, `10·log10(4 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Invalid("psnr needs clips of equal dims".into()));
    }
    let n = a.pixels().len() as f64;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (4.0 / mse).log10()).min(PSNR_CAP))
}

pub fn mean_abs_error(a: &VideoClip, b: &VideoClip) -> f64 {
    let n = a.pixels().len() as f64;
    a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x - y).abs() as f64).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_per_clip: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_l1: f64,
    pub codebook_usage: f64,
    pub codebook_perplexity: f64,
}

pub fn evaluate(tok: &Tokenizer, clips: &[VideoClip]) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one clip".into()));
    }
    let (recon, indices) = tok.reconstruct_many(clips, 8)?;
    let psnr_per_clip = clips.iter().zip(&recon).map(|(c, r)| psnr(c, r)).collect::<Result<Vec<_>>>()?;
    let mean_l1 = clips.iter().zip(&recon).map(|(c, r)| mean_abs_error(c, r)).sum::<f64>() / clips.len() as f64;
    let counts = histogram(&indices, tok.config.k);
    Ok(EvalReport {
        mean_psnr: psnr_per_clip.iter().sum::<f64>() / psnr_per_clip.len() as f64,
        psnr_per_clip,
        mean_l1,
        codebook_usage: usage_fraction(&counts),
        codebook_perplexity: perplexity(&counts),
    })
}

/// Squared distance under which a pixel counts as object-colored.
const OBJECT_DIST2: f32 = 0.25;

fn object_pixels(clip: &VideoClip, t: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for y in 0..clip.height {
        for x in 0..clip.width {
            let px = clip.pixel(t, y, x);
            let k = nearest_palette(px);
            let d2: f32 = px.iter().zip(&PALETTE[k]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < OBJECT_DIST2 {
                out.push((k, y, x));
            }
        }
    }
    out
}

/// Majority palette entry among object-colored pixels of the first frame.
pub fn classify_appearance(clip: &VideoClip) -> Option<usize> {
    let mut votes = [0usize; PALETTE.len()];
    object_pixels(clip, 0).iter().for_each(|&(k, _, _)| votes[k] += 1);
    let (best, &n) = votes.iter().enumerate().max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))?;
    (n > 0).then_some(best)
}

/// Direction index whose unit vector best matches the object's first-to-last
/// centroid displacement.
pub fn classify_motion(clip: &VideoClip) -> Option<usize> {
    let centroid = |t| {
        let px = object_pixels(clip, t);
        if px.is_empty() {
            return None;
        }
        let n = px.len() as f32;
        Some((px.iter().map(|p| p.2 as f32).sum::<f32>() / n, px.iter().map(|p| p.1 as f32).sum::<f32>() / n))
    };
    let (x0, y0) = centroid(0)?;
    let (x1, y1) = centroid(clip.frames - 1)?;
    let (dx, dy) = (x1 - x0, y1 - y0);
    if dx.abs() + dy.abs() < 0.5 {
        return None;
    }
    (0..DIRECTIONS.len()).max_by(|&a, &b| {
        let s = |i: usize| DIRECTIONS[i][0] * dx + DIRECTIONS[i][1] * dy;
        s(a).total_cmp(&s(b)).then(b.cmp(&a))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEntry {
    pub pair: (usize, usize),
    /// `(appearance, motion)` classified on the reconstructions of x and y.
    pub source_x: (Option<usize>, Option<usize>),
    pub source_y: (Option<usize>, Option<usize>),
    /// x with y's appearance tokens, and y with x's.
    pub swapped_x: (Option<usize>, Option<usize>),
    pub swapped_y: (Option<usize>, Option<usize>),
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub entries: Vec<SwapEntry>,
    /// Fraction of swapped decodes whose appearance follows the donor clip.
    pub appearance_follows_donor: f64,
    /// Fraction of swapped decodes whose motion stays with the recipient clip.
    pub motion_stays: f64,
}

fn classify(c: &VideoClip) -> (Option<usize>, Option<usize>) {
    (classify_appearance(c), classify_motion(c))
}

/// Exchanges appearance tokens within each pair, decodes, writes the videos under
/// `out_dir` and classifies every decode by palette color and motion direction.
pub fn swap_report(tok: &Tokenizer, clips: &[VideoClip], pairs: &[(usize, usize)], out_dir: &Path) -> Result<SwapReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    let (mut app_ok, mut mot_ok, mut total) = (0usize, 0usize, 0usize);
    for &(i, j) in pairs {
        let (x, y) = match (clips.get(i), clips.get(j)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::Invalid(format!("pair ({i}, {j}) outside {} clips", clips.len()))),
        };
        let (tx, ty) = (tok.tokenize(x)?, tok.tokenize(y)?);
        let (sx, sy) = swap_tokens(&tx, &ty, Factor::Appearance)?;
        let decoded = [tok.detokenize(&tx)?, tok.detokenize(&ty)?, tok.detokenize(&sx)?, tok.detokenize(&sy)?];
        let mut files = Vec::new();
        for (name, clip) in ["x", "y", "x_app_from_y", "y_app_from_x"].iter().zip(&decoded) {
            let path = out_dir.join(format!("pair_{i:03}_{j:03}_{name}.dvid"));
            save_clip(&path, clip)?;
            files.push(path);
        }
        let [rx, ry, rsx, rsy] = decoded.each_ref().map(classify);
        for (swapped, donor, recipient) in [(rsx, ry, rx), (rsy, rx, ry)] {
            total += 1;
            app_ok += (swapped.0.is_some() && swapped.0 == donor.0) as usize;
            mot_ok += (swapped.1.is_some() && swapped.1 == recipient.1) as usize;
        }
        entries.push(SwapEntry { pair: (i, j), source_x: rx, source_y: ry, swapped_x: rsx, swapped_y: rsy, files });
    }
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    let report = SwapReport { entries, appearance_follows_donor: frac(app_ok), motion_stays: frac(mot_ok) };
    let path = out_dir.join("swap_report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videolab::{generate_dataset, DatasetConfig};

    #[test]
    fn psnr_examples() {
        let a = VideoClip::filled(1, 2, 2, 0.0).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = VideoClip::filled(1, 2, 2, 0.1).unwrap();
        assert!((psnr(&a, &b).unwrap() - 10.0 * (4.0f64 / 0.01).log10()).abs() < 1e-4);
        let c = VideoClip::filled(1, 3, 2, 0.0).unwrap();
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ground_truth_clips_classify_to_their_factors() {
        let cfg = DatasetConfig { n_clips: 8, ..Default::default() };
        for (i, clip) in generate_dataset(&cfg).unwrap().iter().enumerate() {
            let (app, motion) = crate::videolab::dataset::factors(i);
            assert_eq!(classify_appearance(clip), Some(app), "clip {i}");
            assert_eq!(classify_motion(clip), Some(motion), "clip {i}");
        }
    }
}
