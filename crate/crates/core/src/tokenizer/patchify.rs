//! Lossless rearrangement between clips and patch matrices.
//!
//! Rows run over `(time block, row block, column block)` in raster order; a row holds
//! its `t × p × p × 3` values in `(frame, y, x, channel)` order.

use diffcore::Tensor;

use crate::error::{Error, Result};
use crate::videolab::{VideoClip, CHANNELS};

fn check(clip_dims: (usize, usize, usize), t: usize, p: usize) -> Result<()> {
    let (frames, h, w) = clip_dims;
    if t == 0 || p == 0 || frames % t != 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Invalid(format!(
            "{frames}x{h}x{w} clip is not divisible into {t}x{p}x{p} patches"
        )));
    }
    Ok(())
}

fn gather(pixels: &[f32], frames: usize, h: usize, w: usize, t: usize, p: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(frames * h * w * CHANNELS);
    for tb in 0..frames / t {
        for hb in 0..h / p {
            for wb in 0..w / p {
                for dt in 0..t {
                    for dy in 0..p {
                        let at = (((tb * t + dt) * h + hb * p + dy) * w + wb * p) * CHANNELS;
                        out.extend_from_slice(&pixels[at..at + p * CHANNELS]);
                    }
                }
            }
        }
    }
    out
}

fn scatter(rows: &[f32], frames: usize, h: usize, w: usize, t: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; frames * h * w * CHANNELS];
    let mut src = 0;
    for tb in 0..frames / t {
        for hb in 0..h / p {
            for wb in 0..w / p {
                for dt in 0..t {
                    for dy in 0..p {
                        let at = (((tb * t + dt) * h + hb * p + dy) * w + wb * p) * CHANNELS;
                        out[at..at + p * CHANNELS].copy_from_slice(&rows[src..src + p * CHANNELS]);
                        src += p * CHANNELS;
                    }
                }
            }
        }
    }
    out
}

/// Frame-0 patches, `[(H/p)·(W/p), p·p·3]`.
pub fn patchify_frame(clip: &VideoClip, p: usize) -> Result<Tensor> {
    check((1, clip.height, clip.width), 1, p)?;
    let data = gather(clip.frame(0), 1, clip.height, clip.width, 1, p);
    let rows = (clip.height / p) * (clip.width / p);
    Ok(Tensor::new(vec![rows, p * p * CHANNELS], data)?)
}

/// Tubelet patches, `[(T/t)·(H/p)·(W/p), t·p·p·3]`.
pub fn patchify_video(clip: &VideoClip, t: usize, p: usize) -> Result<Tensor> {
    check((clip.frames, clip.height, clip.width), t, p)?;
    let data = gather(clip.pixels(), clip.frames, clip.height, clip.width, t, p);
    let rows = (clip.frames / t) * (clip.height / p) * (clip.width / p);
    Ok(Tensor::new(vec![rows, t * p * p * CHANNELS], data)?)
}

/// Inverse of [`patchify_frame`]; returns one frame's `H×W×3` pixels.
pub fn unpatchify_frame(patches: &[f32], height: usize, width: usize, p: usize) -> Result<Vec<f32>> {
    check((1, height, width), 1, p)?;
    if patches.len() != height * width * CHANNELS {
        return Err(Error::Invalid(format!("{} patch values for a {height}x{width} frame", patches.len())));
    }
    Ok(scatter(patches, 1, height, width, 1, p))
}

/// Inverse of [`patchify_video`] on raw values (no range check or clamping).
pub fn unpatchify_video(patches: &[f32], frames: usize, height: usize, width: usize, t: usize, p: usize) -> Result<Vec<f32>> {
    check((frames, height, width), t, p)?;
    if patches.len() != frames * height * width * CHANNELS {
        return Err(Error::Invalid(format!(
            "{} patch values for a {frames}x{height}x{width} clip",
            patches.len()
        )));
    }
    Ok(scatter(patches, frames, height, width, t, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize, h: usize, w: usize) -> VideoClip {
        let n = frames * h * w * CHANNELS;
        let px = (0..n).map(|i| (i as f32 / n as f32) * 2.0 - 1.0).collect();
        VideoClip::new(frames, h, w, px, None).unwrap()
    }

    #[test]
    fn frame_patch_counts() {
        let clip = VideoClip::filled(1, 128, 128, 0.0).unwrap();
        assert_eq!(patchify_frame(&clip, 8).unwrap().shape(), &[256, 192]);
        let clip = ramp(2, 32, 32);
        assert_eq!(patchify_frame(&clip, 4).unwrap().shape(), &[64, 48]);
    }

    #[test]
    fn video_patch_counts() {
        let clip = VideoClip::filled(16, 128, 128, 0.0).unwrap();
        assert_eq!(patchify_video(&clip, 4, 8).unwrap().shape()[0], 1024);
        let clip = ramp(8, 32, 32);
        assert_eq!(patchify_video(&clip, 2, 4).unwrap().shape(), &[256, 96]);
    }

    #[test]
    fn first_row_is_top_left_block() {
        let clip = ramp(2, 8, 8);
        let rows = patchify_frame(&clip, 4).unwrap();
        assert_eq!(&rows.row(0)[..3], &clip.pixel(0, 0, 0));
        assert_eq!(&rows.row(0)[12..15], &clip.pixel(0, 1, 0));
        assert_eq!(&rows.row(1)[..3], &clip.pixel(0, 0, 4));
    }

    #[test]
    fn constant_frame_has_identical_rows() {
        let clip = VideoClip::filled(2, 8, 8, 0.3).unwrap();
        let rows = patchify_frame(&clip, 4).unwrap();
        for r in 1..4 {
            assert_eq!(rows.row(r), rows.row(0));
        }
    }

    #[test]
    fn static_clip_tubelets_repeat_in_time() {
        let frame = ramp(1, 8, 8);
        let mut px = frame.pixels().to_vec();
        px.extend_from_slice(frame.pixels());
        let clip = VideoClip::new(2, 8, 8, px, None).unwrap();
        let rows = patchify_video(&clip, 2, 4).unwrap();
        let half = rows.shape()[1] / 2;
        for r in 0..rows.shape()[0] {
            assert_eq!(&rows.row(r)[..half], &rows.row(r)[half..]);
        }
    }

    #[test]
    fn round_trips_are_bitwise() {
        let clip = ramp(4, 8, 12);
        let v = patchify_video(&clip, 2, 4).unwrap();
        assert_eq!(unpatchify_video(v.data(), 4, 8, 12, 2, 4).unwrap(), clip.pixels());
        let f = patchify_frame(&clip, 4).unwrap();
        assert_eq!(unpatchify_frame(f.data(), 8, 12, 4).unwrap(), clip.frame(0));
    }

    #[test]
    fn indivisible_dims_error() {
        let clip = ramp(3, 8, 8);
        assert!(patchify_video(&clip, 2, 4).is_err());
        assert!(patchify_frame(&clip, 3).is_err());
    }
}
