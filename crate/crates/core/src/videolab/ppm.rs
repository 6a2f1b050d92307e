use std::path::{Path, PathBuf};

use super::clip::VideoClip;
use crate::error::{Error, Result};

/// Maps [−1, 1] to 0..=255, rounding half away from zero (so 0.0 lands on 128).
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn encode_frame(clip: &VideoClip, t: usize) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", clip.width, clip.height).into_bytes();
    out.extend(clip.frame(t).iter().map(|&v| to_u8(v)));
    out
}

/// Writes one binary PPM per frame as `{prefix}_{t:03}.ppm`.
pub fn dump_frames(prefix: &Path, clip: &VideoClip) -> Result<Vec<PathBuf>> {
    let stem = prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = prefix.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    (0..clip.frames)
        .map(|t| {
            let path = dir.join(format!("{stem}_{t:03}.ppm"));
            std::fs::write(&path, encode_frame(clip, t)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(bytes: &[u8]) -> &[u8] {
        let header_len = b"P6\n2 2\n255\n".len();
        &bytes[header_len..]
    }

    #[test]
    fn extremes_and_mid_gray() {
        for (v, want) in [(-1.0, 0u8), (1.0, 255), (0.0, 128)] {
            let clip = VideoClip::filled(1, 2, 2, v).unwrap();
            assert!(body(&encode_frame(&clip, 0)).iter().all(|&b| b == want));
        }
    }

    #[test]
    fn dump_writes_one_file_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::filled(3, 2, 2, 0.5).unwrap();
        let paths = dump_frames(&dir.path().join("f"), &clip).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[2].ends_with("f_002.ppm"));
        assert!(std::fs::read(&paths[0]).unwrap().starts_with(b"P6\n2 2\n255\n"));
    }
}
