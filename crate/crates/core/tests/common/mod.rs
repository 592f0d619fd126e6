//! Shared helpers for the integration suites: independent oracles (direct
//! DFT, brute-force peak scan, finite differences) and reduced-size configs.

#![allow(dead_code)]

use dualcycon::matrix::Matrix;
use dualcycon::model::{AttentionAxis, BlockOrder, BranchMode, ModelConfig};
use dualcycon::preprocess::{HalfCycle, Peak, PreprocessConfig};
use dualcycon::signal_io::{MeasurementFeatures, PhaseId};
use dualcycon::synth::SynthConfig;
use dualcycon::tensor::{Graph, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- independent oracles ----

/// Full-spectrum direct DFT of a windowed frame, written independently of the
/// library path (complex accumulation via angle per term, no argument
/// reduction, all `n` bins).
pub fn dft_oracle(segment: &[f64], window: &[f64]) -> Vec<(f64, f64)> {
    let n = segment.len();
    assert_eq!(n, window.len());
    let mut bins = Vec::with_capacity(n);
    for k in 0..n {
        let mut re = 0.0;
        let mut im = 0.0;
        for m in 0..n {
            let v = segment[m] * window[m];
            let angle = -2.0 * std::f64::consts::PI * (k as f64) * (m as f64) / n as f64;
            re += v * angle.cos();
            im += v * angle.sin();
        }
        bins.push((re, im));
    }
    bins
}

/// Literal transcription of the peak definition: `x[i]` positive, at or above
/// the floor, strictly greater than everything left of it in the window and
/// at least everything right of it.
pub fn peak_scan_oracle(x: &[f64], half_width: usize, min_height: f64) -> Vec<usize> {
    let n = x.len();
    let mut peaks = Vec::new();
    'outer: for i in 0..n {
        let v = x[i];
        if !(v > 0.0) || v < min_height {
            continue;
        }
        let lo = i.saturating_sub(half_width);
        let hi = (i + half_width).min(n.saturating_sub(1));
        for j in lo..=hi {
            if j < i && x[j] >= v {
                continue 'outer;
            }
            if j > i && x[j] > v {
                continue 'outer;
            }
        }
        peaks.push(i);
    }
    peaks
}

// ---- finite differences ----

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x0`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64]) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        x[i] = x0[i] + FD_STEP;
        let fp = f(&x);
        x[i] = x0[i] - FD_STEP;
        let fm = f(&x);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    grad
}

/// Largest relative disagreement, floored to keep finite-difference noise on
/// near-zero coordinates from dominating.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Checks one op's input gradients against central differences. `build` maps
/// input leaves to the op output; the scalar objective is the mean of the
/// output weighted elementwise by a fixed pseudo-random probe, so every
/// output coordinate contributes with a distinct weight.
pub fn fd_check_op(
    shapes: &[&[usize]],
    seed: u64,
    range: (f64, f64),
    tol: f64,
    build: &dyn Fn(&mut Graph, &[Tensor]) -> Tensor,
) {
    let mut r = rng(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>())
                .map(|_| r.random_range(range.0..range.1))
                .collect()
        })
        .collect();

    let objective = |flats: &[Vec<f64>]| -> (Graph, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(flats)
            .map(|(s, d)| g.leaf(s, d.clone()))
            .collect();
        let out = build(&mut g, &leaves);
        let out_shape = g.shape(out).to_vec();
        let mut probe_rng = rng(seed ^ 0xABCD);
        let probe_data: Vec<f64> = (0..g.data(out).len())
            .map(|_| probe_rng.random_range(0.25..1.0))
            .collect();
        let probe = g.leaf(&out_shape, probe_data);
        let weighted = g.mul_broadcast(out, probe).expect("probe shape matches");
        let all_axes: Vec<usize> = (0..out_shape.len()).collect();
        let loss = g.global_avg_pool(weighted, &all_axes);
        (g, leaves, loss)
    };

    // Analytic gradients.
    let (mut g, leaves, loss) = objective(&inputs);
    g.backward(loss);
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| g.grad(*t).to_vec()).collect();

    // Numeric gradients, one input at a time.
    for (which, flat) in inputs.iter().enumerate() {
        let mut f = |x: &[f64]| -> f64 {
            let mut modified = inputs.clone();
            modified[which] = x.to_vec();
            let (g, _, loss) = objective(&modified);
            g.value(loss)
        };
        let numeric = finite_diff(&mut f, flat);
        let err = max_rel_error(&analytic[which], &numeric);
        assert!(
            err <= tol,
            "input {which} (shape {:?}): max relative error {err:.3e} > {tol:.0e}",
            shapes[which]
        );
    }
}

// ---- reduced-size configs ----

/// Preprocessing config for short synthetic signals. The flattening filter
/// leaves a grid-frequency residual proportional to samples-per-period, so
/// the peak floor scales up with the 40x shorter test period.
pub fn reduced_preprocess_config() -> PreprocessConfig {
    PreprocessConfig {
        ma_window: 250,
        n_p: 16,
        w_t: 32,
        w_f: 64,
        peak_min_height: 0.05,
        ..PreprocessConfig::default()
    }
}

/// Synth config matching `reduced_preprocess_config` timing (20k samples per
/// period, carrier 1000x grid frequency).
pub fn reduced_synth_config(seed: u64) -> SynthConfig {
    SynthConfig {
        n_samples: 20_000,
        sample_rate_hz: 1.0e6,
        grid_freq_hz: 50.0,
        noise_std: 0.01,
        pd_pulse_count: 6,
        pd_amplitude: 0.8,
        pd_phase_jitter_deg: 10.0,
        damping: 0.05,
        carrier_freq_hz: 5.0e4,
        seed,
    }
}

/// Model sized for the reduced inputs: three 3x3 stride-1 blocks.
pub fn reduced_model_config() -> ModelConfig {
    ModelConfig {
        n_p: 16,
        w_t: 32,
        f_bins: 33,
        kernel: 3,
        stride: 1,
        filters: [4, 6, 8],
        joint_filters: 12,
        se_reduction: 4,
        lambda: 1.0,
        branch_mode: BranchMode::Full,
        attention: AttentionAxis::Peak,
        block_order: BlockOrder::ConvReluBn,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    }
}

/// Smallest full model, for end-to-end gradient checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        filters: [2, 3, 4],
        joint_filters: 6,
        ..reduced_model_config()
    }
}

// ---- synthetic feature batches ----

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| r.random_range(lo..hi)).collect(),
    )
}

/// Random, range-valid feature matrices for model-level tests.
pub fn random_features(cfg: &ModelConfig, label: u8, seed: u64) -> MeasurementFeatures {
    let mut r = rng(seed);
    MeasurementFeatures {
        id: format!("rand-{seed}"),
        label,
        td_pos: random_matrix(&mut r, cfg.n_p, cfg.w_t, -1.0, 1.0),
        td_neg: random_matrix(&mut r, cfg.n_p, cfg.w_t, -1.0, 1.0),
        fd_pos: random_matrix(&mut r, cfg.n_p, cfg.f_bins, 0.0, 1.0),
        fd_neg: random_matrix(&mut r, cfg.n_p, cfg.f_bins, 0.0, 1.0),
    }
}

/// Swaps the positive and negative half-cycle matrices.
pub fn swap_halves(f: &MeasurementFeatures) -> MeasurementFeatures {
    MeasurementFeatures {
        id: f.id.clone(),
        label: f.label,
        td_pos: f.td_neg.clone(),
        td_neg: f.td_pos.clone(),
        fd_pos: f.fd_neg.clone(),
        fd_neg: f.fd_pos.clone(),
    }
}

// ---- misc ----

pub fn angle_of_sample(t: usize, n: usize) -> f64 {
    360.0 * t as f64 / n as f64
}

pub fn all_peaks_heights(peaks: &[Peak]) -> Vec<f64> {
    peaks.iter().map(|p| p.height).collect()
}

pub fn count_half(peaks: &[Peak], half: HalfCycle) -> usize {
    peaks.iter().filter(|p| p.half == half).count()
}

pub fn phase_tag(peaks: &[Peak], phase: PhaseId) -> usize {
    peaks.iter().filter(|p| p.phase == phase).count()
}
