//! Raw waveform to phase-aligned, denoised, half-cycle pulse matrices.
//!
//! Per phase: smooth with a moving average, locate the 0 and 180 degree
//! zero crossings, rotate the raw signal so index 0 carries phase angle 0,
//! subtract a first-order low-pass tracker to remove grid-frequency content,
//! rectify, pick local maxima, and drop the flat noise tail at the knee of
//! the sorted peak heights. The surviving peaks of all three phases are
//! pooled per half-cycle, the tallest `N_p` are kept, and windows of the
//! flattened signal around each peak form the pulse matrices.

use thiserror::Error;

use crate::matrix::Matrix;
use crate::signal_io::{MeasurementFeatures, PhaseId, RawMeasurement};
use crate::timefreq;

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    /// Moving-average window in samples.
    pub ma_window: usize,
    /// Flattening-filter pole parameters; the tracker is
    /// `z_i = z_{i-1}(alpha-beta)/alpha + beta*x_i/alpha`.
    pub alpha: f64,
    pub beta: f64,
    /// Length of the ramp kernel that smooths peak-height gradients.
    pub knee_kernel_len: usize,
    /// Peaks kept per half-cycle across all three phases.
    pub n_p: usize,
    /// Time-domain window length around each peak.
    pub w_t: usize,
    /// Frequency-domain window length around each peak.
    pub w_f: usize,
    /// Half-width of the maximum filter in samples.
    pub peak_half_width: usize,
    /// Absolute floor on rectified peak height; rejects the residual the
    /// flattening filter leaves of the grid-frequency fundamental.
    pub peak_min_height: f64,
    /// Relative threshold on the smoothed height gradient at the knee.
    pub knee_tau: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            ma_window: 10_000,
            alpha: 100.0,
            beta: 1.0,
            knee_kernel_len: 9,
            n_p: 257,
            w_t: 128,
            w_f: 512,
            peak_half_width: 25,
            peak_min_height: 0.02,
            knee_tau: 1e-3,
        }
    }
}

impl PreprocessConfig {
    /// Number of spectrogram bins produced from a `w_f`-sample window.
    pub fn f_bins(&self) -> usize {
        self.w_f / 2 + 1
    }

    /// Defaults rescaled for 80k-sample test signals (10x shorter period).
    pub fn test_scale() -> Self {
        Self { ma_window: 1_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |msg: &str| Err(PreprocessError::InvalidConfig(msg.into()));
        if self.ma_window == 0 || self.n_p == 0 || self.w_t == 0 || self.w_f == 0 {
            return bad("window sizes and N_p must be positive");
        }
        if self.w_t % 2 != 0 || self.w_f % 2 != 0 {
            return bad("w_t and w_f must be even");
        }
        if !(self.alpha > self.beta && self.beta > 0.0) {
            return bad("flattening filter requires alpha > beta > 0");
        }
        if self.knee_kernel_len < 2 {
            return bad("knee kernel needs at least 2 taps");
        }
        if !(self.knee_tau > 0.0) || self.peak_min_height < 0.0 {
            return bad("knee_tau must be positive and peak_min_height non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("moving-average window {window} exceeds usable signal length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("signal never changes sign: no zero crossing")]
    NoZeroCrossing,
    #[error("phase {phase:?}: {source}")]
    Phase {
        phase: PhaseId,
        #[source]
        source: Box<PreprocessError>,
    },
}

/// Sample indices of the 0 and 180 degree phase angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseAnchors {
    pub idx0: usize,
    pub idx180: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfCycle {
    Positive,
    Negative,
}

/// A rectified-signal local maximum in one phase's aligned signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    /// Sample index in the aligned signal.
    pub t: usize,
    /// `|X_hp|` at `t`.
    pub height: f64,
    pub phase: PhaseId,
    pub half: HalfCycle,
}

/// Pulse windows of one half-cycle; rows past `n_real_peaks` stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfCyclePulseSet {
    pub pulses_t: Matrix,
    pub pulses_f: Matrix,
    pub n_real_peaks: usize,
}

/// Centered moving average; at the edges the window shrinks to the available
/// overlap so the output keeps the input length.
pub fn moving_average(x: &[f64], window: usize) -> Result<Vec<f64>, PreprocessError> {
    let n = x.len();
    if window == 0 || window > n {
        return Err(PreprocessError::WindowTooLarge { window, len: n });
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in x {
        acc += v;
        prefix.push(acc);
    }
    let left = (window - 1) / 2;
    let right = window / 2;
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(n - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64
        })
        .collect())
}

/// Finds the up-crossing (negative to non-negative) and down-crossing with the
/// largest first-difference magnitude, scanning circularly. The anchor is the
/// sample on the non-negative (resp. non-positive) side of the crossing.
pub fn find_phase_anchors(smoothed: &[f64]) -> Result<PhaseAnchors, PreprocessError> {
    let n = smoothed.len();
    if n < 2 {
        return Err(PreprocessError::NoZeroCrossing);
    }
    let mut best_up: Option<(usize, f64)> = None;
    let mut best_down: Option<(usize, f64)> = None;
    for i in 0..n {
        let j = (i + 1) % n;
        let a = smoothed[i];
        let b = smoothed[j];
        if a < 0.0 && b >= 0.0 {
            let g = b - a;
            if best_up.is_none_or(|(_, bg)| g > bg) {
                best_up = Some((j, g));
            }
        } else if a > 0.0 && b <= 0.0 {
            let g = a - b;
            if best_down.is_none_or(|(_, bg)| g > bg) {
                best_down = Some((j, g));
            }
        }
    }
    match (best_up, best_down) {
        (Some((idx0, _)), Some((idx180, _))) => Ok(PhaseAnchors { idx0, idx180 }),
        _ => Err(PreprocessError::NoZeroCrossing),
    }
}

/// Circular rotation so index 0 carries phase angle 0.
pub fn phase_align(x: &[f64], anchors: PhaseAnchors) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| x[(i + anchors.idx0) % n]).collect()
}

/// Subtracts a first-order low-pass tracker seeded at the first sample:
/// `z_1 = x_1`, `z_i = z_{i-1}(alpha-beta)/alpha + beta*x_i/alpha`, output
/// `x_i - z_i`. Constant inputs map to exactly zero.
pub fn flatten_highpass(x_p: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    assert!(alpha > beta && beta > 0.0, "flattening requires alpha > beta > 0");
    let decay = (alpha - beta) / alpha;
    let gain = beta / alpha;
    let mut z = 0.0;
    x_p.iter()
        .enumerate()
        .map(|(i, &v)| {
            z = if i == 0 { v } else { z * decay + gain * v };
            v - z
        })
        .collect()
}

/// Maximum-filter peak detection on a rectified signal. Index `i` is a peak
/// when `x_d[i]` is at least everything in `[i-hw, i+hw]`, strictly greater
/// than everything to its left in that window (so a plateau keeps its leftmost
/// index), positive, and at or above `min_height`.
pub fn detect_peaks(x_d: &[f64], half_width: usize, min_height: f64, phase: PhaseId) -> Vec<Peak> {
    let n = x_d.len();
    let mut peaks = Vec::new();
    for i in 0..n {
        let v = x_d[i];
        if !(v > 0.0 && v >= min_height) {
            continue;
        }
        let lo = i.saturating_sub(half_width);
        let hi = (i + half_width).min(n.saturating_sub(1));
        let beaten_left = x_d[lo..i].iter().any(|&w| w >= v);
        if beaten_left {
            continue;
        }
        let beaten_right = x_d[i + 1..=hi].iter().any(|&w| w > v);
        if beaten_right {
            continue;
        }
        peaks.push(Peak {
            t: i,
            height: v,
            phase,
            half: if i < n / 2 { HalfCycle::Positive } else { HalfCycle::Negative },
        });
    }
    peaks
}

/// Linear "same"-length convolution with a sum-normalized ramp kernel
/// `v_j = j/L`.
fn smooth_gradient(g: &[f64], kernel_len: usize) -> Vec<f64> {
    let l = kernel_len;
    let norm: f64 = (1..=l).map(|j| j as f64).sum::<f64>() / l as f64;
    let kernel: Vec<f64> = (1..=l).map(|j| j as f64 / l as f64 / norm).collect();
    let offset = (l - 1) / 2;
    let mut out = vec![0.0; g.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let k = i + offset;
        for (j, kv) in kernel.iter().enumerate() {
            if k >= j && k - j < g.len() {
                *o += g[k - j] * kv;
            }
        }
    }
    out
}

/// Drops the flat tail of a descending-height peak list. The knee is the
/// first rank whose smoothed height gradient falls to `knee_tau` times the
/// gradient's peak magnitude; if no rank qualifies, all peaks are kept.
pub fn knee_filter(peaks: &[Peak], kernel_len: usize, knee_tau: f64) -> Vec<Peak> {
    if peaks.len() < 2 {
        return peaks.to_vec();
    }
    debug_assert!(
        peaks.windows(2).all(|w| w[0].height >= w[1].height),
        "knee_filter expects peaks sorted by descending height"
    );
    let gradients: Vec<f64> = peaks.windows(2).map(|w| w[1].height - w[0].height).collect();
    let smoothed = smooth_gradient(&gradients, kernel_len);
    let max_mag = smoothed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let knee = smoothed.iter().position(|v| v.abs() <= knee_tau * max_mag);
    match knee {
        Some(k) => peaks[..k].to_vec(),
        None => peaks.to_vec(),
    }
}

/// Pools per-phase, per-half peak lists and keeps the `n_p` tallest of each
/// half. Ordering is by descending height, then earlier sample, then phase
/// A < B < C, so selection is fully deterministic.
pub fn aggregate_three_phase(
    pos: [&[Peak]; 3],
    neg: [&[Peak]; 3],
    n_p: usize,
) -> (Vec<Peak>, Vec<Peak>) {
    let top = |lists: [&[Peak]; 3]| -> Vec<Peak> {
        let mut all: Vec<Peak> = lists.concat();
        all.sort_by(|a, b| {
            b.height
                .total_cmp(&a.height)
                .then(a.t.cmp(&b.t))
                .then((a.phase as u8).cmp(&(b.phase as u8)))
        });
        all.truncate(n_p);
        all
    };
    (top(pos), top(neg))
}

/// Extracts the `[t - w/2, t + w/2)` window of each peak's source-phase
/// flattened signal into row `r`; out-of-range samples and rows past the peak
/// count stay zero.
pub fn extract_windows(
    signals: &[Vec<f64>; 3],
    peaks: &[Peak],
    w: usize,
    n_p: usize,
) -> Matrix {
    let mut out = Matrix::zeros(n_p, w);
    let half = (w / 2) as isize;
    for (r, peak) in peaks.iter().take(n_p).enumerate() {
        let signal = &signals[peak.phase.index()];
        let row = out.row_mut(r);
        let start = peak.t as isize - half;
        for (c, slot) in row.iter_mut().enumerate() {
            let idx = start + c as isize;
            if idx >= 0 && (idx as usize) < signal.len() {
                *slot = signal[idx as usize];
            }
        }
    }
    out
}

/// Runs the per-phase chain and the three-phase aggregation, producing the
/// positive and negative half-cycle pulse sets. Deterministic.
pub fn extract_pulse_sets(
    m: &RawMeasurement,
    cfg: &PreprocessConfig,
) -> Result<(HalfCyclePulseSet, HalfCyclePulseSet), PreprocessError> {
    cfg.validate()?;
    let n = m.n_samples();
    if n < 2 * cfg.ma_window {
        return Err(PreprocessError::WindowTooLarge { window: cfg.ma_window, len: n / 2 });
    }

    let mut flattened: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut pos: [Vec<Peak>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut neg: [Vec<Peak>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for phase in PhaseId::ALL {
        let in_phase = |e: PreprocessError| PreprocessError::Phase { phase, source: Box::new(e) };
        let raw = m.phase(phase);
        let smoothed = moving_average(raw, cfg.ma_window).map_err(in_phase)?;
        let anchors = find_phase_anchors(&smoothed).map_err(in_phase)?;
        let aligned = phase_align(raw, anchors);
        let x_hp = flatten_highpass(&aligned, cfg.alpha, cfg.beta);
        let x_d: Vec<f64> = x_hp.iter().map(|v| v.abs()).collect();

        let mut peaks = detect_peaks(&x_d, cfg.peak_half_width, cfg.peak_min_height, phase);
        peaks.sort_by(|a, b| b.height.total_cmp(&a.height).then(a.t.cmp(&b.t)));
        let kept = knee_filter(&peaks, cfg.knee_kernel_len, cfg.knee_tau);

        let i = phase.index();
        for peak in kept {
            match peak.half {
                HalfCycle::Positive => pos[i].push(peak),
                HalfCycle::Negative => neg[i].push(peak),
            }
        }
        flattened[i] = x_hp;
    }

    let (pos_sel, neg_sel) = aggregate_three_phase(
        [&pos[0], &pos[1], &pos[2]],
        [&neg[0], &neg[1], &neg[2]],
        cfg.n_p,
    );

    let build = |selected: &[Peak]| HalfCyclePulseSet {
        pulses_t: extract_windows(&flattened, selected, cfg.w_t, cfg.n_p),
        pulses_f: extract_windows(&flattened, selected, cfg.w_f, cfg.n_p),
        n_real_peaks: selected.len().min(cfg.n_p),
    };
    Ok((build(&pos_sel), build(&neg_sel)))
}

/// Normalized model inputs from the pulse sets: pulse matrices min-max scaled
/// to `[-1, 1]`, log-spectrograms to `[0, 1]`.
pub fn features_from_pulse_sets(
    id: &str,
    label: u8,
    pos: &HalfCyclePulseSet,
    neg: &HalfCyclePulseSet,
) -> MeasurementFeatures {
    MeasurementFeatures {
        id: id.to_string(),
        label,
        td_pos: timefreq::normalize_symmetric(&pos.pulses_t),
        td_neg: timefreq::normalize_symmetric(&neg.pulses_t),
        fd_pos: timefreq::normalize_unit(&timefreq::log_spectrogram(&pos.pulses_f)),
        fd_neg: timefreq::normalize_unit(&timefreq::log_spectrogram(&neg.pulses_f)),
    }
}

/// Full preprocessing of one measurement.
pub fn preprocess_measurement(
    m: &RawMeasurement,
    cfg: &PreprocessConfig,
) -> Result<MeasurementFeatures, PreprocessError> {
    let (pos, neg) = extract_pulse_sets(m, cfg)?;
    Ok(features_from_pulse_sets(&m.id, m.label, &pos, &neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn sine(n: usize) -> Vec<f64> {
        (0..n).map(|i| (TAU * i as f64 / n as f64).sin()).collect()
    }

    fn peak(t: usize, height: f64) -> Peak {
        Peak { t, height, phase: PhaseId::A, half: HalfCycle::Positive }
    }

    #[test]
    fn moving_average_constant_is_identity() {
        let x = vec![2.5; 40];
        for window in [1, 3, 8, 40] {
            let y = moving_average(&x, window).unwrap();
            assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn moving_average_window_sums() {
        let y = moving_average(&[0.0, 0.0, 4.0, 0.0, 0.0], 3).unwrap();
        let expected = [0.0, 4.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0, 0.0];
        assert_eq!(y, expected);
    }

    #[test]
    fn moving_average_window_too_large() {
        assert!(matches!(
            moving_average(&[1.0, 2.0], 3),
            Err(PreprocessError::WindowTooLarge { window: 3, len: 2 })
        ));
    }

    #[test]
    fn anchors_on_pure_sine() {
        let n = 1000;
        let a = find_phase_anchors(&sine(n)).unwrap();
        assert!(a.idx0 == 0 || a.idx0 == 1 || a.idx0 == n - 1, "idx0={}", a.idx0);
        assert!(a.idx180.abs_diff(500) <= 1, "idx180={}", a.idx180);
    }

    #[test]
    fn anchors_on_negated_sine_swap() {
        let n = 1000;
        let x: Vec<f64> = sine(n).iter().map(|v| -v).collect();
        let a = find_phase_anchors(&x).unwrap();
        assert!(a.idx0.abs_diff(500) <= 1, "idx0={}", a.idx0);
        assert!(a.idx180 == 0 || a.idx180 == 1 || a.idx180 == n - 1, "idx180={}", a.idx180);
    }

    #[test]
    fn anchors_need_a_sign_change() {
        assert!(matches!(
            find_phase_anchors(&[1.0, 2.0, 0.5, 3.0]),
            Err(PreprocessError::NoZeroCrossing)
        ));
    }

    #[test]
    fn phase_align_rotates() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(phase_align(&x, PhaseAnchors { idx0: 0, idx180: 2 }), x);
        assert_eq!(
            phase_align(&x, PhaseAnchors { idx0: 2, idx180: 0 }),
            [3.0, 4.0, 1.0, 2.0]
        );
    }

    #[test]
    fn realigning_an_aligned_sine_is_stable() {
        let n = 1000;
        let x = sine(n);
        let a = find_phase_anchors(&x).unwrap();
        let aligned = phase_align(&x, a);
        let again = find_phase_anchors(&aligned).unwrap();
        assert!(again.idx0 <= 1 || again.idx0 == n - 1, "idx0={}", again.idx0);
    }

    #[test]
    fn flatten_constant_to_zero() {
        let out = flatten_highpass(&vec![3.7; 500], 100.0, 1.0);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn flatten_step_response() {
        let mut x = vec![0.0; 10];
        x.extend(vec![1.0; 10]);
        let out = flatten_highpass(&x, 100.0, 1.0);
        assert!(out[..10].iter().all(|&v| v == 0.0));
        assert!((out[10] - 0.99).abs() < 1e-12);
        for k in 10..18 {
            assert!((out[k + 1] / out[k] - 0.99).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_is_linear() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37 + 11) % 91) as f64 / 13.0 - 3.0).collect();
        let lhs = flatten_highpass(&x.iter().map(|v| v * 2.5).collect::<Vec<_>>(), 100.0, 1.0);
        let rhs: Vec<f64> = flatten_highpass(&x, 100.0, 1.0).iter().map(|v| v * 2.5).collect();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn detect_peaks_single_impulse() {
        let mut x = vec![0.0; 100];
        x[50] = 1.0;
        let peaks = detect_peaks(&x, 5, 0.0, PhaseId::A);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].t, 50);
        assert_eq!(peaks[0].height, 1.0);
        // Sample n/2 sits exactly at 180 degrees, which opens the negative half.
        assert_eq!(peaks[0].half, HalfCycle::Negative);

        let mut x = vec![0.0; 100];
        x[49] = 1.0;
        assert_eq!(detect_peaks(&x, 5, 0.0, PhaseId::A)[0].half, HalfCycle::Positive);
    }

    #[test]
    fn detect_peaks_plateau_keeps_left_index() {
        let mut x = vec![0.0; 20];
        x[8] = 5.0;
        x[9] = 5.0;
        let peaks = detect_peaks(&x, 3, 0.0, PhaseId::B);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].t, 8);
    }

    #[test]
    fn detect_peaks_rectified_sine_has_two() {
        let n = 200;
        let x: Vec<f64> = (0..n).map(|i| (TAU * i as f64 / n as f64).sin().abs()).collect();
        let peaks = detect_peaks(&x, 5, 0.0, PhaseId::A);
        assert_eq!(peaks.len(), 2);
        assert_eq!(peaks[0].half, HalfCycle::Positive);
        assert_eq!(peaks[1].half, HalfCycle::Negative);
    }

    #[test]
    fn detect_peaks_respects_min_height() {
        let mut x = vec![0.0; 60];
        x[10] = 0.01;
        x[40] = 0.5;
        let peaks = detect_peaks(&x, 5, 0.02, PhaseId::A);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].t, 40);
    }

    #[test]
    fn knee_filter_cuts_constant_tail() {
        let heights = [100.0, 50.0, 25.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        let peaks: Vec<Peak> = heights.iter().enumerate().map(|(i, &h)| peak(i, h)).collect();
        let kept = knee_filter(&peaks, 9, 0.01);

        // Independent evaluation of the same rule: differences, ramp-kernel
        // "same" convolution, first index at or below tau * max magnitude.
        let g: Vec<f64> = heights.windows(2).map(|w| w[1] - w[0]).collect();
        let l = 9usize;
        let norm: f64 = (1..=l).map(|j| j as f64 / l as f64).sum();
        let mut smooth = vec![0.0; g.len()];
        for (i, s) in smooth.iter_mut().enumerate() {
            for j in 1..=l {
                let full_idx = i + (l - 1) / 2;
                let m = full_idx as isize - (j as isize - 1);
                if m >= 0 && (m as usize) < g.len() {
                    *s += g[m as usize] * (j as f64 / l as f64) / norm;
                }
            }
        }
        let max_mag = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let expect_k = smooth
            .iter()
            .position(|v| v.abs() <= 0.01 * max_mag)
            .expect("tail must flatten");

        // Hand evaluation: smoothed magnitudes peak at rank 4 (755/45) and the
        // ramp first reaches zero at rank 7, so seven peaks survive.
        assert_eq!(expect_k, 7);
        assert_eq!(kept.len(), expect_k);
        assert!(kept.len() < heights.len(), "tail must be dropped");
        // Every informative peak survives; everything dropped is tail.
        assert_eq!(kept.iter().filter(|p| p.height > 10.0).count(), 3);
        assert!(peaks[kept.len()..].iter().all(|p| p.height == 10.0));
    }

    #[test]
    fn knee_filter_passes_tiny_lists_through() {
        assert!(knee_filter(&[], 9, 1e-3).is_empty());
        let single = [peak(3, 7.0)];
        assert_eq!(knee_filter(&single, 9, 1e-3), single);
    }

    #[test]
    fn knee_filter_keeps_all_when_no_flat_region() {
        let peaks: Vec<Peak> = (0..12).map(|i| peak(i, 100.0 * 0.5f64.powi(i as i32))).collect();
        let kept = knee_filter(&peaks, 9, 1e-9);
        assert_eq!(kept.len(), peaks.len());
    }

    #[test]
    fn aggregate_selects_top_n_with_deterministic_ties() {
        let mk = |phase: PhaseId, n: usize| -> Vec<Peak> {
            (0..n)
                .map(|i| Peak {
                    t: i * 10,
                    height: 1000.0 - i as f64,
                    phase,
                    half: HalfCycle::Positive,
                })
                .collect()
        };
        let a = mk(PhaseId::A, 100);
        let b = mk(PhaseId::B, 100);
        let c = mk(PhaseId::C, 100);
        let (pos, neg) = aggregate_three_phase([&a, &b, &c], [&[], &[], &[]], 257);
        assert_eq!(pos.len(), 257);
        assert!(neg.is_empty());

        // Order-correctness against a brute-force sort of the union.
        let mut all = [a, b, c].concat();
        all.sort_by(|x, y| y.height.total_cmp(&x.height));
        let min_kept = pos.iter().map(|p| p.height).fold(f64::INFINITY, f64::min);
        let max_dropped = all[257..].iter().map(|p| p.height).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_kept >= max_dropped);

        // Equal heights break ties by time then phase.
        assert_eq!(pos[0].phase, PhaseId::A);
        assert_eq!(pos[1].phase, PhaseId::B);
        assert_eq!(pos[2].phase, PhaseId::C);
    }

    #[test]
    fn aggregate_exact_capacity_keeps_everything() {
        let peaks: Vec<Peak> = (0..5).map(|i| peak(i, i as f64)).collect();
        let (pos, _) = aggregate_three_phase([&peaks, &[], &[]], [&[], &[], &[]], 5);
        assert_eq!(pos.len(), 5);
        assert!(pos.windows(2).all(|w| w[0].height >= w[1].height));
    }

    #[test]
    fn extract_windows_zero_fills_boundaries() {
        let signals = [
            (0..10).map(|i| i as f64 + 1.0).collect::<Vec<_>>(),
            vec![0.0; 10],
            vec![0.0; 10],
        ];
        let m = extract_windows(&signals, &[peak(0, 1.0)], 4, 3);
        assert_eq!(m.row(0), &[0.0, 0.0, 1.0, 2.0]);
        assert!(m.row(1).iter().all(|&v| v == 0.0));
        assert!(m.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extract_windows_mid_signal_matches_direct_slice() {
        let signals = [
            (0..50).map(|i| (i as f64).sin()).collect::<Vec<_>>(),
            vec![0.0; 50],
            vec![0.0; 50],
        ];
        let m = extract_windows(&signals, &[peak(20, 1.0)], 8, 1);
        assert_eq!(m.row(0), &signals[0][16..24]);
    }

    #[test]
    fn extract_windows_no_peaks_is_all_zero() {
        let signals = [vec![1.0; 10], vec![1.0; 10], vec![1.0; 10]];
        let m = extract_windows(&signals, &[], 6, 4);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }
}
