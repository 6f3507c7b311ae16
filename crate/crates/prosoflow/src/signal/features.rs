//! Per-utterance feature bundles and their binary cache format.
//!
//! Cache layout, all little-endian after a mandatory version byte:
//!
//! ```text
//! u8  version
//! u32 T (frames)   u32 n_mels   u32 n_phonemes   u32 sample_rate   u32 hop
//! f64[T * n_mels] mel   f64[T] f0   u8[T] voiced   f64[T] energy
//! u32[n_phonemes] durations   u32[n_phonemes] phoneme ids
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::pitch::{fill_and_log_pitch, PitchContour};
use super::SignalError;
use crate::tensor::Tensor;

pub const CACHE_VERSION: u8 = 1;

/// Everything the trainer needs for one utterance.
#[derive(Clone, Debug)]
pub struct UtteranceFeatures {
    pub id: String,
    pub phoneme_ids: Vec<u32>,
    /// Frames per phoneme; sums to the frame count.
    pub durations: Vec<u32>,
    /// frames x n_mels log-mel matrix.
    pub mel: Tensor,
    /// Raw f0 in Hz, 0 on unvoiced frames.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    /// Interpolated log-f0, the pitch modeling target.
    pub log_f0_filled: Vec<f64>,
    pub energy: Vec<f64>,
    pub sample_rate: u32,
    pub hop: u32,
}

impl UtteranceFeatures {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.mel.cols()
    }

    /// Length alignment across mel, f0 and energy plus the duration sum.
    pub fn validate(&self) -> Result<(), SignalError> {
        let t = self.frames();
        if self.f0.len() != t || self.voiced.len() != t || self.energy.len() != t {
            return Err(SignalError::LengthMismatch {
                mel: t,
                f0: self.f0.len(),
                energy: self.energy.len(),
            });
        }
        let total: usize = self.durations.iter().map(|&d| d as usize).sum();
        if total != t {
            return Err(SignalError::DurationMismatch {
                frames: t,
                duration_sum: total,
            });
        }
        Ok(())
    }
}

/// Errors for the cache container.
#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("truncated cache file: needed {needed} more bytes for {section}")]
    Truncated { section: &'static str, needed: usize },
    #[error("cache payload invalid: {0}")]
    Invalid(String),
}

pub fn write_cache(path: &Path, f: &UtteranceFeatures) -> Result<(), CacheError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.push(CACHE_VERSION);
    let t = f.frames() as u32;
    for v in [t, f.n_mels() as u32, f.phoneme_ids.len() as u32, f.sample_rate, f.hop] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in f.mel.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &f.f0 {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &f.voiced {
        buf.push(v as u8);
    }
    for v in &f.energy {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &f.durations {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &f.phoneme_ids {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], CacheError> {
        if self.pos + n > self.buf.len() {
            return Err(CacheError::Truncated {
                section,
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>, CacheError> {
        let raw = self.take(8 * n, section)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize, section: &'static str) -> Result<Vec<u32>, CacheError> {
        let raw = self.take(4 * n, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_cache(path: &Path) -> Result<UtteranceFeatures, CacheError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw, pos: 0 };

    let version = r.take(1, "version")?[0];
    if version != CACHE_VERSION {
        return Err(CacheError::VersionMismatch {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let t = r.u32("header")? as usize;
    let n_mels = r.u32("header")? as usize;
    let n_phonemes = r.u32("header")? as usize;
    let sample_rate = r.u32("header")?;
    let hop = r.u32("header")?;

    let mel = r.f64s(t * n_mels, "mel")?;
    let f0 = r.f64s(t, "f0")?;
    let voiced: Vec<bool> = r.take(t, "voiced")?.iter().map(|&b| b != 0).collect();
    let energy = r.f64s(t, "energy")?;
    let durations = r.u32s(n_phonemes, "durations")?;
    let phoneme_ids = r.u32s(n_phonemes, "phoneme ids")?;

    let contour = PitchContour {
        f0: f0.clone(),
        voiced: voiced.clone(),
    };
    let log_f0_filled = fill_and_log_pitch(&contour)
        .map_err(|e| CacheError::Invalid(format!("pitch fill failed: {e}")))?;

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let features = UtteranceFeatures {
        id,
        phoneme_ids,
        durations,
        mel: Tensor::new(vec![t, n_mels], mel),
        f0,
        voiced,
        log_f0_filled,
        energy,
        sample_rate,
        hop,
    };
    features
        .validate()
        .map_err(|e| CacheError::Invalid(e.to_string()))?;
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_features() -> UtteranceFeatures {
        UtteranceFeatures {
            id: "utt".into(),
            phoneme_ids: vec![2, 5],
            durations: vec![2, 1],
            mel: Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()),
            f0: vec![200.0, 0.0, 210.0],
            voiced: vec![true, false, true],
            log_f0_filled: vec![200f64.ln(), 205f64.ln(), 210f64.ln()],
            energy: vec![1.0, 0.5, 0.25],
            sample_rate: 22050,
            hop: 256,
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.feat");
        let f = sample_features();
        write_cache(&path, &f).unwrap();
        let g = read_cache(&path).unwrap();
        assert_eq!(g.phoneme_ids, f.phoneme_ids);
        assert_eq!(g.durations, f.durations);
        assert_eq!(g.mel, f.mel);
        assert_eq!(g.f0, f.f0);
        assert_eq!(g.voiced, f.voiced);
        assert_eq!(g.energy, f.energy);
        assert_eq!(g.sample_rate, 22050);
        assert_eq!(g.id, "utt");
        // filled pitch is recomputed on load from (f0, voiced)
        assert!((g.log_f0_filled[0] - 200f64.ln()).abs() < 1e-12);
        assert!((g.log_f0_filled[1] - 205f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.feat");
        write_cache(&path, &sample_features()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_cache(&path),
            Err(CacheError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.feat");
        write_cache(&path, &sample_features()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_cache(&path), Err(CacheError::Truncated { .. })));
    }
}
