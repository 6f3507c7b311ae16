//! Mel filterbank and log-mel spectrograms.

use super::stft::{frame_count, stft_magnitudes};
use super::{SignalConfig, SignalError, Waveform};
use crate::tensor::Tensor;

/// Log-magnitude mel spectrogram plus the framing that produced it.
#[derive(Clone, Debug)]
pub struct MelSpectrogram {
    /// frames x n_mels natural-log mel magnitudes, floored at log(floor_eps).
    pub frames: Tensor,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Slaney-style Hz -> mel: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if f < min_log_hz {
        f / f_sp
    } else {
        min_log_mel + (f / min_log_hz).ln() / logstep
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if m < min_log_mel {
        m * f_sp
    } else {
        min_log_hz * ((m - min_log_mel) * logstep).exp()
    }
}

/// Triangular mel filterbank, peak 1 per filter: n_mels x (n_fft/2 + 1).
pub fn mel_filterbank(cfg: &SignalConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let fmax = if cfg.fmax > 0.0 { cfg.fmax } else { cfg.sample_rate as f64 / 2.0 };
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();

    let mut bank = vec![vec![0.0; bins]; cfg.n_mels];
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, &f) in bin_hz.iter().enumerate() {
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            bank[m][k] = w;
        }
    }
    bank
}

/// Center frequency (Hz) of each mel filter; used by the mel-domain f0 estimator.
pub fn mel_filter_centers(cfg: &SignalConfig) -> Vec<f64> {
    let fmax = if cfg.fmax > 0.0 { cfg.fmax } else { cfg.sample_rate as f64 / 2.0 };
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    (0..cfg.n_mels)
        .map(|m| mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Log-mel spectrogram with centered Hann frames.
pub fn mel_spectrogram(w: &Waveform, cfg: &SignalConfig) -> Result<MelSpectrogram, SignalError> {
    let mags = linear_magnitudes(w, cfg)?;
    Ok(mel_from_magnitudes(&mags, cfg))
}

/// Linear magnitude frames shared by the mel, energy and Griffin-Lim paths.
pub fn linear_magnitudes(w: &Waveform, cfg: &SignalConfig) -> Result<Vec<Vec<f64>>, SignalError> {
    if w.samples.is_empty() {
        return Err(SignalError::EmptyWaveform);
    }
    if cfg.n_mels > cfg.n_fft / 2 + 1 {
        return Err(SignalError::TooManyMelBands {
            n_mels: cfg.n_mels,
            bins: cfg.n_fft / 2 + 1,
        });
    }
    Ok(stft_magnitudes(&w.samples, cfg.n_fft, cfg.hop))
}

/// Mel projection and log compression of precomputed magnitude frames.
pub fn mel_from_magnitudes(mags: &[Vec<f64>], cfg: &SignalConfig) -> MelSpectrogram {
    let bank = mel_filterbank(cfg);
    let t = mags.len();
    let mut data = Vec::with_capacity(t * cfg.n_mels);
    for row in mags {
        for filt in &bank {
            let e: f64 = filt.iter().zip(row).map(|(&w, &m)| w * m).sum();
            data.push(e.max(cfg.floor_eps).ln());
        }
    }
    MelSpectrogram {
        frames: Tensor::new(vec![t, cfg.n_mels], data),
        hop: cfg.hop,
        n_fft: cfg.n_fft,
        n_mels: cfg.n_mels,
        sample_rate: cfg.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64) -> Waveform {
        let n = (rate as f64 * secs) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn silence_is_floored_everywhere() {
        let cfg = SignalConfig::default_for(22050);
        let w = Waveform::new(vec![0.0; 5000], 22050).unwrap();
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        let floor = cfg.floor_eps.ln();
        assert!(mel.frames.data().iter().all(|&v| v == floor));
        assert_eq!(mel.len(), frame_count(5000, cfg.hop));
    }

    #[test]
    fn empty_waveform_rejected() {
        let cfg = SignalConfig::default_for(22050);
        let w = Waveform {
            samples: vec![],
            sample_rate: 22050,
        };
        assert!(matches!(mel_spectrogram(&w, &cfg), Err(SignalError::EmptyWaveform)));
    }

    #[test]
    fn too_many_mel_bands_rejected() {
        let mut cfg = SignalConfig::default_for(22050);
        cfg.n_mels = cfg.n_fft / 2 + 2;
        let w = Waveform::new(vec![0.1; 2000], 22050).unwrap();
        assert!(matches!(
            mel_spectrogram(&w, &cfg),
            Err(SignalError::TooManyMelBands { .. })
        ));
    }

    #[test]
    fn one_second_at_22050_gives_87_frames() {
        let cfg = SignalConfig::default_for(22050);
        let w = sine(440.0, 22050, 1.0);
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(mel.len(), 87);
    }

    #[test]
    fn sine_peaks_in_the_band_containing_440hz() {
        let cfg = SignalConfig::default_for(22050);
        let w = sine(440.0, 22050, 1.0);
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        // which mel band holds 440 Hz
        let centers = mel_filter_centers(&cfg);
        let expect_band = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        let t = mel.len();
        let mut hits = 0;
        let interior = 4..t - 4;
        let mut total = 0;
        for ti in interior {
            let row = &mel.frames.data()[ti * cfg.n_mels..(ti + 1) * cfg.n_mels];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax.abs_diff(expect_band) <= 1 {
                hits += 1;
            }
            total += 1;
        }
        assert!(
            hits as f64 >= 0.95 * total as f64,
            "{} of {} interior frames peak near band {}",
            hits,
            total,
            expect_band
        );
    }

    #[test]
    fn mel_scale_roundtrip() {
        for f in [0.0, 60.0, 440.0, 999.0, 1000.0, 4000.0, 11025.0] {
            let rt = mel_to_hz(hz_to_mel(f));
            assert!((rt - f).abs() < 1e-9 * f.max(1.0));
        }
    }
}
