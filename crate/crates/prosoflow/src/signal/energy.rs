//! Frame-level energy: the L2 norm of each linear magnitude frame.

/// Energy per frame from the same STFT magnitudes used for the mel.
pub fn extract_energy(magnitudes: &[Vec<f64>]) -> Vec<f64> {
    magnitudes
        .iter()
        .map(|row| row.iter().map(|&v| v * v).sum::<f64>().sqrt())
        .collect()
}
