//! Flat `key = value` run configuration.
//!
//! One file carries the preprocessing, model, training, and synth settings;
//! unknown keys are rejected so typos cannot silently fall back to defaults.
//! Every key has a default, command-line `--set key=value` pairs override
//! file values, and the fully resolved table is echoed next to each run's
//! outputs so a run can be reproduced from its own artifacts.

use dualcycon::model::{AttentionAxis, BlockOrder, BranchMode, ModelConfig};
use dualcycon::preprocess::PreprocessConfig;
use dualcycon::synth::SynthConfig;
use dualcycon::training::TrainConfig;

use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    // Model architecture; input dims come from `preprocess`.
    pub kernel: usize,
    pub stride: usize,
    pub filters: [usize; 3],
    pub joint_filters: usize,
    pub se_reduction: usize,
    pub lambda: f64,
    pub ablation: BranchMode,
    pub attention: AttentionAxis,
    pub block_order: BlockOrder,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            kernel: model.kernel,
            stride: model.stride,
            filters: model.filters,
            joint_filters: model.joint_filters,
            se_reduction: model.se_reduction,
            lambda: model.lambda,
            ablation: model.branch_mode,
            attention: model.attention,
            block_order: model.block_order,
            bn_momentum: model.bn_momentum,
            bn_eps: model.bn_eps,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("key {key}: cannot parse {value:?}"))
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_p: self.preprocess.n_p,
            w_t: self.preprocess.w_t,
            f_bins: self.preprocess.f_bins(),
            kernel: self.kernel,
            stride: self.stride,
            filters: self.filters,
            joint_filters: self.joint_filters,
            se_reduction: self.se_reduction,
            lambda: self.lambda,
            branch_mode: self.ablation,
            attention: self.attention,
            block_order: self.block_order,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            // preprocessing
            "ma_window" => self.preprocess.ma_window = parse(key, v)?,
            "alpha" => self.preprocess.alpha = parse(key, v)?,
            "beta" => self.preprocess.beta = parse(key, v)?,
            "knee_kernel_len" => self.preprocess.knee_kernel_len = parse(key, v)?,
            "n_p" => self.preprocess.n_p = parse(key, v)?,
            "w_t" => self.preprocess.w_t = parse(key, v)?,
            "w_f" => self.preprocess.w_f = parse(key, v)?,
            "peak_half_width" => self.preprocess.peak_half_width = parse(key, v)?,
            "peak_min_height" => self.preprocess.peak_min_height = parse(key, v)?,
            "knee_tau" => self.preprocess.knee_tau = parse(key, v)?,
            // model
            "kernel" => self.kernel = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "filters" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(format!("key filters: need 3 comma-separated values, got {v:?}"));
                }
                for (slot, p) in self.filters.iter_mut().zip(&parts) {
                    *slot = parse("filters", p)?;
                }
            }
            "joint_filters" => self.joint_filters = parse(key, v)?,
            "se_reduction" => self.se_reduction = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "ablation" => {
                self.ablation = match v {
                    "full" => BranchMode::Full,
                    "td" => BranchMode::TdOnly,
                    "fd" => BranchMode::FdOnly,
                    other => return Err(format!("key ablation: {other:?} is not full|td|fd")),
                }
            }
            "attention" => {
                self.attention = match v {
                    "none" => AttentionAxis::None,
                    "channel" => AttentionAxis::Channel,
                    "feature" => AttentionAxis::Feature,
                    "peak" => AttentionAxis::Peak,
                    other => {
                        return Err(format!(
                            "key attention: {other:?} is not none|channel|feature|peak"
                        ))
                    }
                }
            }
            "block_order" => {
                self.block_order = match v {
                    "conv_relu_bn" => BlockOrder::ConvReluBn,
                    "conv_bn_relu" => BlockOrder::ConvBnRelu,
                    other => {
                        return Err(format!(
                            "key block_order: {other:?} is not conv_relu_bn|conv_bn_relu"
                        ))
                    }
                }
            }
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "bn_eps" => self.bn_eps = parse(key, v)?,
            // training
            "lr" => self.train.lr = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "folds" => self.train.folds = parse(key, v)?,
            "seed" => {
                let seed = parse(key, v)?;
                self.train.seed = seed;
                self.synth.seed = seed;
            }
            "threshold" => self.train.threshold = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "adam_eps" => self.train.adam_eps = parse(key, v)?,
            // synth
            "synth_n_samples" => self.synth.n_samples = parse(key, v)?,
            "sample_rate_hz" => self.synth.sample_rate_hz = parse(key, v)?,
            "grid_freq_hz" => self.synth.grid_freq_hz = parse(key, v)?,
            "noise_std" => self.synth.noise_std = parse(key, v)?,
            "pd_pulse_count" => self.synth.pd_pulse_count = parse(key, v)?,
            "pd_amplitude" => self.synth.pd_amplitude = parse(key, v)?,
            "pd_phase_jitter_deg" => self.synth.pd_phase_jitter_deg = parse(key, v)?,
            "damping" => self.synth.damping = parse(key, v)?,
            "carrier_freq_hz" => self.synth.carrier_freq_hz = parse(key, v)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Reads a `key = value` file: one pair per line, `#` comments.
    pub fn load_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!(
                    "{}:{}: expected `key = value`, found {raw:?}",
                    path.display(),
                    lineno + 1
                ));
            };
            self.set(key.trim(), value)
                .map_err(|e| format!("{}:{}: {e}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), String> {
        for pair in pairs {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(format!("--set needs key=value, found {pair:?}"));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// The fully resolved table, parseable by `load_file`.
    pub fn render(&self) -> String {
        let p = &self.preprocess;
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("ma_window", p.ma_window.to_string());
        kv("alpha", p.alpha.to_string());
        kv("beta", p.beta.to_string());
        kv("knee_kernel_len", p.knee_kernel_len.to_string());
        kv("n_p", p.n_p.to_string());
        kv("w_t", p.w_t.to_string());
        kv("w_f", p.w_f.to_string());
        kv("peak_half_width", p.peak_half_width.to_string());
        kv("peak_min_height", p.peak_min_height.to_string());
        kv("knee_tau", p.knee_tau.to_string());
        kv("kernel", self.kernel.to_string());
        kv("stride", self.stride.to_string());
        kv(
            "filters",
            format!("{},{},{}", self.filters[0], self.filters[1], self.filters[2]),
        );
        kv("joint_filters", self.joint_filters.to_string());
        kv("se_reduction", self.se_reduction.to_string());
        kv("lambda", self.lambda.to_string());
        kv(
            "ablation",
            match self.ablation {
                BranchMode::Full => "full",
                BranchMode::TdOnly => "td",
                BranchMode::FdOnly => "fd",
            }
            .to_string(),
        );
        kv(
            "attention",
            match self.attention {
                AttentionAxis::None => "none",
                AttentionAxis::Channel => "channel",
                AttentionAxis::Feature => "feature",
                AttentionAxis::Peak => "peak",
            }
            .to_string(),
        );
        kv(
            "block_order",
            match self.block_order {
                BlockOrder::ConvReluBn => "conv_relu_bn",
                BlockOrder::ConvBnRelu => "conv_bn_relu",
            }
            .to_string(),
        );
        kv("bn_momentum", self.bn_momentum.to_string());
        kv("bn_eps", self.bn_eps.to_string());
        kv("lr", t.lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("folds", t.folds.to_string());
        kv("seed", t.seed.to_string());
        kv("threshold", t.threshold.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("synth_n_samples", s.n_samples.to_string());
        kv("sample_rate_hz", s.sample_rate_hz.to_string());
        kv("grid_freq_hz", s.grid_freq_hz.to_string());
        kv("noise_std", s.noise_std.to_string());
        kv("pd_pulse_count", s.pd_pulse_count.to_string());
        kv("pd_amplitude", s.pd_amplitude.to_string());
        kv("pd_phase_jitter_deg", s.pd_phase_jitter_deg.to_string());
        kv("damping", s.damping.to_string());
        kv("carrier_freq_hz", s.carrier_freq_hz.to_string());
        out
    }
}
