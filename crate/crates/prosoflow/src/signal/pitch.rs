//! Frame-level f0 estimation by normalized autocorrelation.
//!
//! The tracker shares the mel spectrogram's hop and centering so every
//! utterance has equally many mel, f0 and energy frames. Peaks are refined by
//! parabolic interpolation; frames whose peak falls below the voicing
//! threshold are unvoiced.

use super::stft::{frame_count, reflect_pad};
use super::{SignalConfig, SignalError, Waveform};

/// Per-frame pitch track with voicing decisions.
#[derive(Clone, Debug)]
pub struct PitchContour {
    /// f0 in Hz; exactly 0 on unvoiced frames.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl PitchContour {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|v| **v).count()
    }
}

/// Autocorrelation pitch tracking over the mel framing.
pub fn estimate_f0(w: &Waveform, cfg: &SignalConfig) -> Result<PitchContour, SignalError> {
    if cfg.f0_min >= cfg.f0_max {
        return Err(SignalError::BadF0Range {
            fmin: cfg.f0_min,
            fmax: cfg.f0_max,
        });
    }
    if w.samples.is_empty() {
        return Err(SignalError::EmptyWaveform);
    }
    let rate = w.sample_rate as f64;
    assert!(
        rate >= 2.0 * cfg.f0_max,
        "sample rate {} cannot carry f0 up to {}",
        rate,
        cfg.f0_max
    );
    let win = cfg.n_fft;
    let lag_min = (rate / cfg.f0_max).ceil() as usize;
    let lag_max = ((rate / cfg.f0_min).floor() as usize).min(win - 2);

    let padded = reflect_pad(&w.samples, win / 2);
    let frames = frame_count(w.samples.len(), cfg.hop);
    let mut f0 = Vec::with_capacity(frames);
    let mut voiced = Vec::with_capacity(frames);

    let mut corr = vec![0.0; lag_max + 2];
    for t in 0..frames {
        let start = t * cfg.hop;
        let frame = &padded[start..start + win];
        let mean = frame.iter().sum::<f64>() / win as f64;
        let x: Vec<f64> = frame.iter().map(|&v| v - mean).collect();

        // prefix sums of squares for O(1) normalization per lag
        let mut sq = vec![0.0; win + 1];
        for i in 0..win {
            sq[i + 1] = sq[i] + x[i] * x[i];
        }
        if sq[win] < 1e-10 {
            f0.push(0.0);
            voiced.push(false);
            continue;
        }

        for lag in lag_min.saturating_sub(1)..=(lag_max + 1).min(win - 1) {
            let m = win - lag;
            let num: f64 = (0..m).map(|i| x[i] * x[i + lag]).sum();
            let e1 = sq[m];
            let e2 = sq[win] - sq[lag];
            corr[lag] = if e1 > 0.0 && e2 > 0.0 {
                num / (e1 * e2).sqrt()
            } else {
                0.0
            };
        }

        let mut best_lag = lag_min;
        let mut best = f64::NEG_INFINITY;
        for lag in lag_min..=lag_max {
            if corr[lag] > best {
                best = corr[lag];
                best_lag = lag;
            }
        }

        if best >= cfg.voicing_threshold {
            // parabolic refinement over the peak triplet
            let (rm, r0, rp) = (corr[best_lag - 1], corr[best_lag], corr[best_lag + 1]);
            let denom = rm - 2.0 * r0 + rp;
            let delta = if denom.abs() > 1e-12 {
                (0.5 * (rm - rp) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            f0.push(rate / (best_lag as f64 + delta));
            voiced.push(true);
        } else {
            f0.push(0.0);
            voiced.push(false);
        }
    }

    Ok(PitchContour { f0, voiced })
}

/// Interpolates unvoiced gaps (edges held) and applies the natural log.
///
/// An utterance with no voiced frames carries no usable pitch target.
pub fn fill_and_log_pitch(p: &PitchContour) -> Result<Vec<f64>, SignalError> {
    if p.voiced_count() == 0 {
        return Err(SignalError::NoVoicedFrames);
    }
    let n = p.len();
    let mut filled = p.f0.clone();

    let first = p.voiced.iter().position(|&v| v).unwrap();
    let last = n - 1 - p.voiced.iter().rev().position(|&v| v).unwrap();
    for v in filled.iter_mut().take(first) {
        *v = p.f0[first];
    }
    for v in filled.iter_mut().skip(last + 1) {
        *v = p.f0[last];
    }

    let mut i = first;
    while i < last {
        if p.voiced[i + 1] {
            i += 1;
            continue;
        }
        let gap_start = i;
        let mut j = i + 1;
        while !p.voiced[j] {
            j += 1;
        }
        let (a, b) = (p.f0[gap_start], p.f0[j]);
        let span = (j - gap_start) as f64;
        for k in gap_start + 1..j {
            let frac = (k - gap_start) as f64 / span;
            filled[k] = a + (b - a) * frac;
        }
        i = j;
    }

    Ok(filled.into_iter().map(f64::ln).collect())
}
