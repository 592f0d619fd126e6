//! Per-pulse spectrograms and final input normalization.
//!
//! Each extracted pulse window is its own STFT frame (zero hop, zero
//! overlap), so the transform is a single windowed DFT per matrix row. The
//! direct O(n^2) evaluation is deliberate: frames are at most 512 samples and
//! row counts are small, so a fast transform would buy nothing but code.

use num_complex::Complex64;
use thiserror::Error;

use crate::matrix::Matrix;

/// Guard added inside the log so zero-padded rows stay finite.
pub const LOG_POWER_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimefreqError {
    #[error("segment length {segment} does not match window length {window}")]
    LengthMismatch { segment: usize, window: usize },
}

/// Periodic Hann window: `w[m] = 0.5 - 0.5 cos(2 pi m / n)`.
pub fn hann_window(n: usize) -> Vec<f64> {
    assert!(n >= 2, "window needs at least 2 points");
    (0..n)
        .map(|m| 0.5 - 0.5 * (std::f64::consts::TAU * m as f64 / n as f64).cos())
        .collect()
}

/// Windowed DFT of one frame, returning bins `0..=n/2`.
pub fn stft_frame(segment: &[f64], window: &[f64]) -> Result<Vec<Complex64>, TimefreqError> {
    let n = segment.len();
    if n != window.len() {
        return Err(TimefreqError::LengthMismatch { segment: n, window: window.len() });
    }
    let weighted: Vec<f64> = segment.iter().zip(window).map(|(x, w)| x * w).collect();
    let mut bins = Vec::with_capacity(n / 2 + 1);
    for k in 0..=n / 2 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, &v) in weighted.iter().enumerate() {
            // Reduce k*m mod n before the trig call to keep large products accurate.
            let angle = -std::f64::consts::TAU * ((k * m) % n) as f64 / n as f64;
            acc += Complex64::new(v * angle.cos(), v * angle.sin());
        }
        bins.push(acc);
    }
    Ok(bins)
}

/// Row-wise log power spectrogram: `log(|X(i,k)|^2 + eps)` with a Hann window
/// the length of each row. An `N_p x w_f` matrix becomes `N_p x (w_f/2 + 1)`.
pub fn log_spectrogram(pulses_f: &Matrix) -> Matrix {
    let n = pulses_f.cols();
    let window = hann_window(n);
    let bins = n / 2 + 1;
    let mut out = Matrix::zeros(pulses_f.rows(), bins);
    for r in 0..pulses_f.rows() {
        let spectrum = stft_frame(pulses_f.row(r), &window).expect("window sized to row");
        for (k, c) in spectrum.iter().enumerate() {
            out.set(r, k, (c.norm_sqr() + LOG_POWER_EPS).ln());
        }
    }
    out
}

/// Whole-matrix min-max scaling to `[-1, 1]`; a constant matrix maps to zeros.
pub fn normalize_symmetric(m: &Matrix) -> Matrix {
    normalize(m, -1.0, 1.0)
}

/// Whole-matrix min-max scaling to `[0, 1]`; a constant matrix maps to zeros.
pub fn normalize_unit(m: &Matrix) -> Matrix {
    normalize(m, 0.0, 1.0)
}

fn normalize(m: &Matrix, lo: f64, hi: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let Some((min, max)) = m.min_max() else {
        return out;
    };
    if max == min {
        return out;
    }
    // Dividing per element keeps the endpoints exact: (max-min)/(max-min) is 1.
    let range = max - min;
    for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
        *o = lo + (hi - lo) * ((v - min) / range);
    }
    out
}
