//! Griffin-Lim phase reconstruction from log-mel spectrograms.
//!
//! The mel filterbank is inverted through a ridge-regularized normal-equation
//! pseudo-inverse; phases start random (seeded) and are refined by the classic
//! project-and-replace iteration, which monotonically improves STFT
//! consistency.

use rand::Rng;
use rustfft::num_complex::Complex;

use super::mel::{mel_filterbank, MelSpectrogram};
use super::stft::{istft, stft_complex};
use super::{SignalConfig, Waveform};
use crate::tensor::{stream_rng, Stream};

/// Dense pseudo-inverse of the mel filterbank: bins x n_mels.
pub fn mel_pseudo_inverse(cfg: &SignalConfig) -> Vec<Vec<f64>> {
    let bank = mel_filterbank(cfg);
    let m = cfg.n_mels;
    let bins = cfg.n_fft / 2 + 1;

    // gram = bank * bank^T + ridge
    let mut gram = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let dot: f64 = bank[i].iter().zip(&bank[j]).map(|(&a, &b)| a * b).sum();
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
        gram[i][i] += 1e-8;
    }

    // Cholesky factorization gram = L L^T
    let mut l = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = gram[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = s.max(1e-12).sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }

    // pinv = bank^T * gram^{-1}, solved column by column
    let mut pinv = vec![vec![0.0; m]; bins];
    let mut col = vec![0.0; m];
    for c in 0..m {
        // solve L y = e_c, then L^T x = y
        for i in 0..m {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i][k] * col[k];
            }
            col[i] = s / l[i][i];
        }
        for i in (0..m).rev() {
            let mut s = col[i];
            for k in i + 1..m {
                s -= l[k][i] * col[k];
            }
            col[i] = s / l[i][i];
        }
        for (b, row) in pinv.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, &ci) in col.iter().enumerate() {
                s += bank[i][b] * ci;
            }
            row[c] = s;
        }
    }
    pinv
}

/// Linear magnitude frames recovered from a log-mel spectrogram.
pub fn mel_to_linear(mel: &MelSpectrogram, cfg: &SignalConfig) -> Vec<Vec<f64>> {
    let pinv = mel_pseudo_inverse(cfg);
    let bins = cfg.n_fft / 2 + 1;
    let t = mel.len();
    let mut out = vec![vec![0.0; bins]; t];
    for ti in 0..t {
        let row = &mel.frames.data()[ti * cfg.n_mels..(ti + 1) * cfg.n_mels];
        let lin: Vec<f64> = row.iter().map(|&v| v.exp()).collect();
        for b in 0..bins {
            let v: f64 = pinv[b].iter().zip(&lin).map(|(&p, &e)| p * e).sum();
            out[ti][b] = v.max(0.0);
        }
    }
    out
}

/// Waveform reconstruction; `iters == 0` returns the random-phase inverse STFT.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &SignalConfig, iters: usize, seed: u64) -> Waveform {
    let target = mel_to_linear(mel, cfg);
    let t = target.len();
    let bins = cfg.n_fft / 2 + 1;
    let out_len = (t.saturating_sub(1)) * cfg.hop + 1;

    let mut rng = stream_rng(seed, Stream::Phase);
    let mut est: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|row| {
            row.iter()
                .map(|&m| {
                    let phi: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    Complex::from_polar(m, phi)
                })
                .collect()
        })
        .collect();

    for _ in 0..iters {
        let signal = istft(&est, cfg.n_fft, cfg.hop, out_len);
        let rebuilt = stft_complex(&signal, cfg.n_fft, cfg.hop);
        for ti in 0..t.min(rebuilt.len()) {
            for b in 0..bins {
                let c = rebuilt[ti][b];
                let mag = c.norm();
                est[ti][b] = if mag > 1e-12 {
                    c / mag * target[ti][b]
                } else {
                    Complex::new(target[ti][b], 0.0)
                };
            }
        }
    }

    let samples = istft(&est, cfg.n_fft, cfg.hop, out_len);
    Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    }
}
