//! Deterministic DSP: waveform analysis and Griffin-Lim resynthesis.
//!
//! All operations are pure given their configuration; features extracted from
//! the same waveform are length-aligned by construction because every
//! extractor shares one framing rule.

mod energy;
mod features;
mod griffin;
mod mel;
mod phoneme;
pub mod stft;
mod pitch;

pub use energy::extract_energy;
pub use features::{read_cache, write_cache, CacheError, UtteranceFeatures, CACHE_VERSION};
pub use griffin::{griffin_lim, mel_pseudo_inverse, mel_to_linear};
pub use mel::{
    hz_to_mel, linear_magnitudes, mel_filter_centers, mel_filterbank, mel_from_magnitudes,
    mel_spectrogram, mel_to_hz, MelSpectrogram,
};
pub use phoneme::{expand_by_durations, frame_to_phoneme, phoneme_average};
pub use pitch::{estimate_f0, fill_and_log_pitch, PitchContour};

use serde::{Deserialize, Serialize};

/// A mono waveform with its sample rate.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::BadSampleRate);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::NonFiniteSamples);
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis configuration shared by every extractor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Lowest mel filter edge in Hz.
    pub fmin: f64,
    /// Highest mel filter edge in Hz; 0 means sample_rate / 2.
    pub fmax: f64,
    /// Magnitude floor applied before the log.
    pub floor_eps: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
}

impl SignalConfig {
    /// Defaults: 1024-point window, 256 hop, 80 mel bands, f0 in [60, 800] Hz.
    pub fn default_for(sample_rate: u32) -> Self {
        SignalConfig {
            sample_rate,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 0.0,
            floor_eps: 1e-5,
            f0_min: 60.0,
            f0_max: 800.0,
            voicing_threshold: 0.45,
        }
    }
}

/// Errors raised by the analysis operations.
#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("waveform contains non-finite samples")]
    NonFiniteSamples,
    #[error("n_mels {n_mels} exceeds the {bins} spectrum bins")]
    TooManyMelBands { n_mels: usize, bins: usize },
    #[error("f0 search range invalid: fmin {fmin} >= fmax {fmax}")]
    BadF0Range { fmin: f64, fmax: f64 },
    #[error("no voiced frames; utterance unusable for pitch training")]
    NoVoicedFrames,
    #[error("durations sum to {duration_sum} but there are {frames} frames")]
    DurationMismatch { frames: usize, duration_sum: usize },
    #[error("feature lengths disagree: mel {mel}, f0 {f0}, energy {energy}")]
    LengthMismatch { mel: usize, f0: usize, energy: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_rejects_nan() {
        assert!(matches!(
            Waveform::new(vec![0.0, f64::NAN], 22050),
            Err(SignalError::NonFiniteSamples)
        ));
    }

    #[test]
    fn extractors_are_pure() {
        let cfg = SignalConfig::default_for(22050);
        let samples: Vec<f64> = (0..9000)
            .map(|i| (2.0 * std::f64::consts::PI * 250.0 * i as f64 / 22050.0).sin() * 0.7)
            .collect();
        let w = Waveform::new(samples, 22050).unwrap();
        let m1 = mel_spectrogram(&w, &cfg).unwrap();
        let m2 = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(m1.frames, m2.frames);
        let p1 = estimate_f0(&w, &cfg).unwrap();
        let p2 = estimate_f0(&w, &cfg).unwrap();
        assert_eq!(p1.f0, p2.f0);
        let mags = linear_magnitudes(&w, &cfg).unwrap();
        assert_eq!(extract_energy(&mags), extract_energy(&mags));
    }

    #[test]
    fn feature_lengths_align() {
        let cfg = SignalConfig::default_for(22050);
        let samples: Vec<f64> = (0..7777)
            .map(|i| (2.0 * std::f64::consts::PI * 180.0 * i as f64 / 22050.0).sin())
            .collect();
        let w = Waveform::new(samples, 22050).unwrap();
        let mags = linear_magnitudes(&w, &cfg).unwrap();
        let mel = mel_from_magnitudes(&mags, &cfg);
        let p = estimate_f0(&w, &cfg).unwrap();
        let e = extract_energy(&mags);
        assert_eq!(mel.len(), p.len());
        assert_eq!(mel.len(), e.len());
    }

    #[test]
    fn fill_is_idempotent_on_fully_voiced() {
        let p = PitchContour {
            f0: vec![100.0, 150.0, 200.0],
            voiced: vec![true, true, true],
        };
        let once = fill_and_log_pitch(&p).unwrap();
        // feeding the filled contour back (as exp) must reproduce it
        let again = fill_and_log_pitch(&PitchContour {
            f0: once.iter().map(|v| v.exp()).collect(),
            voiced: vec![true, true, true],
        })
        .unwrap();
        for (a, b) in once.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
