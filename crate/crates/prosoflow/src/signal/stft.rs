//! Short-time Fourier analysis with centered frames.
//!
//! Frames are centered on multiples of the hop length via reflection padding,
//! so a signal of n samples always yields floor(n / hop) + 1 frames. The same
//! framing is reused by the pitch tracker to keep every feature aligned.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of centered frames for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Signal padded with `pad` reflected samples on each side.
pub fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        let k = pad - i;
        out.push(samples[reflect_index(k as isize, n)]);
    }
    out.extend_from_slice(samples);
    for i in 1..=pad {
        out.push(samples[reflect_index((n as isize - 1) - i as isize, n)]);
    }
    out
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Complex STFT: `frame_count` rows of n_fft/2 + 1 bins.
pub fn stft_complex(samples: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<Complex<f64>>> {
    let window = hann_window(n_fft);
    let padded = reflect_pad(samples, n_fft / 2);
    let frames = frame_count(samples.len(), hop);
    let bins = n_fft / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..bins].to_vec());
    }
    out
}

/// Magnitude spectrogram rows aligned with [`stft_complex`].
pub fn stft_magnitudes(samples: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    stft_complex(samples, n_fft, hop)
        .into_iter()
        .map(|row| row.into_iter().map(|c| c.norm()).collect())
        .collect()
}

/// Inverse STFT by windowed overlap-add, returning `out_len` samples.
pub fn istft(spec: &[Vec<Complex<f64>>], n_fft: usize, hop: usize, out_len: usize) -> Vec<f64> {
    let window = hann_window(n_fft);
    let frames = spec.len();
    let padded_len = (frames - 1) * hop + n_fft;
    let mut acc = vec![0.0; padded_len];
    let mut norm = vec![0.0; padded_len];

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (t, row) in spec.iter().enumerate() {
        let bins = n_fft / 2 + 1;
        assert_eq!(row.len(), bins, "istft frame width");
        for k in 0..bins {
            buf[k] = row[k];
        }
        for k in bins..n_fft {
            buf[k] = row[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n_fft {
            let v = buf[i].re / n_fft as f64;
            acc[start + i] += v * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    let pad = n_fft / 2;
    (0..out_len)
        .map(|i| {
            let j = i + pad;
            if norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}
