//! Synthetic labeled three-phase measurements for desk-scale runs.
//!
//! A measurement is three 120-degree-shifted unit sinusoids at grid frequency
//! with a random starting phase, plus optional white noise. Damaged
//! measurements get trains of exponentially damped high-frequency bursts
//! injected at one random phase angle of the positive half-cycle and mirrored
//! 180 degrees later (within the configured jitter), with the same amplitude
//! per mirrored pair, into a random subset of the conductors — the same
//! physical fault seen from both half-cycles.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::signal_io::{self, Manifest, ManifestEntry, RawMeasurement, SignalIoError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] SignalIoError),
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub grid_freq_hz: f64,
    pub noise_std: f64,
    /// Mirrored burst pairs injected per damaged measurement.
    pub pd_pulse_count: usize,
    pub pd_amplitude: f64,
    /// Angular spread of burst positions and of the 180-degree mirror.
    pub pd_phase_jitter_deg: f64,
    /// Per-sample decay rate of the burst envelope.
    pub damping: f64,
    /// Burst carrier; well above grid frequency.
    pub carrier_freq_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 80_000,
            sample_rate_hz: 4.0e6,
            grid_freq_hz: 50.0,
            noise_std: 0.02,
            pd_pulse_count: 8,
            pd_amplitude: 0.8,
            pd_phase_jitter_deg: 10.0,
            damping: 0.05,
            carrier_freq_hz: 2.0e5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.into()));
        if self.n_samples < 16 {
            return bad("n_samples too small");
        }
        if self.sample_rate_hz <= 0.0 || self.grid_freq_hz <= 0.0 || self.carrier_freq_hz <= 0.0 {
            return bad("rates must be positive");
        }
        if self.noise_std < 0.0 || self.pd_amplitude <= 0.0 || self.damping <= 0.0 {
            return bad("noise_std must be non-negative, amplitude and damping positive");
        }
        if !(0.0..180.0).contains(&self.pd_phase_jitter_deg) {
            return bad("pd_phase_jitter_deg must be in [0, 180)");
        }
        if self.pd_pulse_count == 0 {
            return bad("pd_pulse_count must be positive");
        }
        Ok(())
    }
}

/// Sample index where conductor `p` reaches `angle_deg`.
fn sample_at_angle(angle_deg: f64, n: usize, theta0_deg: f64, p: usize) -> usize {
    let frac = ((angle_deg - theta0_deg + 120.0 * p as f64) / 360.0).rem_euclid(1.0);
    ((frac * n as f64).round() as usize) % n
}

fn add_burst(signal: &mut [f64], start: usize, amplitude: f64, cfg: &SynthConfig) {
    let n = signal.len();
    let len = ((12.0 / cfg.damping).ceil() as usize).min(n);
    for j in 0..len {
        let envelope = (-cfg.damping * j as f64).exp();
        let carrier = (TAU * cfg.carrier_freq_hz * j as f64 / cfg.sample_rate_hz).sin();
        signal[(start + j) % n] += amplitude * envelope * carrier;
    }
}

/// Generates one measurement; identical seeds produce identical samples.
pub fn gen_signal(label: u8, cfg: &SynthConfig, seed: u64) -> Result<RawMeasurement, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_samples;
    let theta0_deg: f64 = rng.random_range(0.0..360.0);
    let theta0 = theta0_deg.to_radians();

    let mut samples: [Vec<f64>; 3] = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for (p, phase) in samples.iter_mut().enumerate() {
        let offset = TAU * p as f64 / 3.0;
        for i in 0..n {
            phase.push((TAU * i as f64 / n as f64 + theta0 - offset).sin());
        }
    }
    if cfg.noise_std > 0.0 {
        for phase in samples.iter_mut() {
            for v in phase.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += cfg.noise_std * z;
            }
        }
    }

    if label == 1 {
        let jitter = cfg.pd_phase_jitter_deg;
        // Keep bursts clear of the half-cycle boundaries: spill margin covers
        // the jitter plus the burst's own angular footprint.
        let burst_deg = 360.0 * (12.0 / cfg.damping) / n as f64;
        let margin = (jitter + burst_deg + 2.0).min(85.0);
        let phi: f64 = rng.random_range(margin..(180.0 - margin).max(margin + 1e-9));

        let mut conductors = [0usize, 1, 2];
        conductors.shuffle(&mut rng);
        let n_injected = rng.random_range(1..=3usize);
        let injected = &conductors[..n_injected];

        for burst in 0..cfg.pd_pulse_count {
            // Burst 0 is a dominant pair exactly at phi; the rest stay small
            // and clear of its footprint, so the tallest peak of each half
            // always belongs to the mirrored pair.
            let (amplitude, spread) = if burst == 0 {
                (cfg.pd_amplitude, 0.0)
            } else {
                let amplitude = cfg.pd_amplitude * rng.random_range(0.2..0.35);
                let mut spread = 0.0;
                if jitter > 0.0 {
                    for _ in 0..16 {
                        spread = rng.random_range(-jitter..jitter);
                        if spread.abs() > burst_deg {
                            break;
                        }
                    }
                    if spread.abs() <= burst_deg {
                        let pushed = (burst_deg + 0.1).min(jitter);
                        spread = if spread >= 0.0 { pushed } else { -pushed };
                    }
                }
                (amplitude, spread)
            };
            let mirror = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            let pos_angle = phi + spread;
            let neg_angle = pos_angle + 180.0 + mirror;
            for &p in injected {
                let pos_start = sample_at_angle(pos_angle, n, theta0_deg, p);
                let neg_start = sample_at_angle(neg_angle, n, theta0_deg, p);
                add_burst(&mut samples[p], pos_start, amplitude, cfg);
                add_burst(&mut samples[p], neg_start, amplitude, cfg);
            }
        }
    }

    Ok(RawMeasurement {
        id: format!("synth-{seed:016x}"),
        samples,
        sample_rate_hz: cfg.sample_rate_hz,
        grid_freq_hz: cfg.grid_freq_hz,
        label,
    })
}

/// Writes `n` measurements (the first `round(n * pd_fraction)` damaged) plus
/// a manifest into `out_dir` and returns the loaded-back manifest view.
pub fn gen_dataset(
    n: usize,
    pd_fraction: f64,
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    if n < 2 {
        return Err(SynthError::InvalidConfig("dataset needs at least 2 measurements".into()));
    }
    if !(0.0 < pd_fraction && pd_fraction < 1.0) {
        return Err(SynthError::InvalidConfig(format!(
            "pd_fraction {pd_fraction} must be strictly between 0 and 1"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(SignalIoError::Io)?;
    let n_pos = (n as f64 * pd_fraction).round() as usize;

    let mut relative = Vec::with_capacity(n);
    let mut resolved = Vec::with_capacity(n);
    for idx in 0..n {
        let label = u8::from(idx < n_pos);
        let mut m = gen_signal(label, cfg, cfg.seed.wrapping_add(idx as u64))?;
        m.id = format!("m{idx:05}");
        let file_name = format!("{}.pdms", m.id);
        let path = out_dir.join(&file_name);
        signal_io::write_measurement(&path, &m)?;
        relative.push(ManifestEntry { id: m.id.clone(), path: file_name.into(), label });
        resolved.push(ManifestEntry { id: m.id, path, label });
    }
    signal_io::write_manifest(&out_dir.join("manifest.csv"), &relative)?;
    Ok(Manifest::from_entries(resolved))
}
