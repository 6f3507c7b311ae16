//! Phoneme-level pooling and duration expansion.

use super::SignalError;

/// Mean of `values` over each phoneme's frame span. Zero-duration phonemes
/// receive 0.
pub fn phoneme_average(values: &[f64], durations: &[usize]) -> Result<Vec<f64>, SignalError> {
    let total: usize = durations.iter().sum();
    if total != values.len() {
        return Err(SignalError::DurationMismatch {
            frames: values.len(),
            duration_sum: total,
        });
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut pos = 0;
    for &d in durations {
        if d == 0 {
            out.push(0.0);
            continue;
        }
        let span = &values[pos..pos + d];
        out.push(span.iter().sum::<f64>() / d as f64);
        pos += d;
    }
    Ok(out)
}

/// Repeats each per-phoneme value by its duration, back to frame rate.
pub fn expand_by_durations(per_phoneme: &[f64], durations: &[usize]) -> Vec<f64> {
    assert_eq!(per_phoneme.len(), durations.len());
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (&v, &d) in per_phoneme.iter().zip(durations) {
        out.extend(std::iter::repeat(v).take(d));
    }
    out
}

/// Phoneme index owning each frame; the gather map used by length regulation.
pub fn frame_to_phoneme(durations: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (i, &d) in durations.iter().enumerate() {
        out.extend(std::iter::repeat(i).take(d));
    }
    out
}
