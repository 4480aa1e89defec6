//! Raw score dumps: a 16-byte header (`b"BMSC"`, then little-endian u32
//! height, width, channels) followed by `C x H x W` little-endian f32.

use std::fs;
use std::path::Path;

use super::predict::Prediction;
use crate::error::{Error, Result};

pub const SCORE_MAGIC: &[u8; 4] = b"BMSC";

pub fn write_scores(path: &Path, p: &Prediction) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * p.scores.len());
    buf.extend_from_slice(SCORE_MAGIC);
    for v in [p.height, p.width, p.n_class] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &p.scores {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns `(height, width, channels, scores)`.
pub fn read_scores(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Contract(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != SCORE_MAGIC {
        return Err(bad("not a score dump"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (u(4), u(8), u(12));
    if bytes.len() != 16 + 4 * h * w * c {
        return Err(bad("truncated score dump"));
    }
    let scores = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((h, w, c, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::label_from_scores;

    #[test]
    fn round_trip() {
        let scores = vec![0.5, -1.0, 2.0, 3.0, 1e-7, f32::MAX];
        let p = Prediction {
            n_class: 2,
            height: 1,
            width: 3,
            labels: label_from_scores(&scores, 2, (1, 3)),
            scores: scores.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_scores(&path, &p).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 24);
        assert_eq!(read_scores(&path).unwrap(), (1, 3, 2, scores));
    }
}
