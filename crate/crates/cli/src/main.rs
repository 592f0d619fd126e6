//! Pipeline driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
//! 4 numeric failure during preprocessing or training.

mod config;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use dualcycon::model::{DualCyConNet, ModelError};
use dualcycon::preprocess::{self, PreprocessError};
use dualcycon::signal_io::{self, ManifestEntry, SignalIoError};
use dualcycon::synth::{self, SynthError};
use dualcycon::tensor::{read_checkpoint, Graph, Mode};
use dualcycon::training::{self, TrainingError};

#[derive(Parser)]
#[command(
    name = "dualcycon",
    about = "Partial-discharge detection pipeline: synthesize, preprocess, train, evaluate, predict"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides applied after the file, e.g. --set epochs=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset with a manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of measurements.
        #[arg(long)]
        n: usize,
        /// Fraction of damaged measurements.
        #[arg(long = "pd-fraction")]
        pd_fraction: f64,
        /// RNG seed (overrides the config value).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn raw measurements into feature files.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Stratified k-fold training over a feature directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold-averaged evaluation of saved checkpoints.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of fold_*.ckpt files (or a single .ckpt file).
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output report (JSON).
        #[arg(long)]
        report: PathBuf,
    },
    /// Preprocess one raw measurement and print its head probabilities.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        measurement: PathBuf,
    },
}

enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<SignalIoError> for CliError {
    fn from(e: SignalIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => CliError::Config(e.to_string()),
            SynthError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_)
            | ModelError::InputTooSmall { .. }
            | ModelError::PeakAxisMismatch { .. }
            | ModelError::CheckpointMismatch(_) => CliError::Config(e.to_string()),
            ModelError::Checkpoint(_) => CliError::Io(e.to_string()),
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::InvalidConfig(_) | TrainingError::ClassTooSmall { .. } => {
                CliError::Config(e.to_string())
            }
            TrainingError::Model(m) => m.into(),
            TrainingError::Io(_) | TrainingError::Checkpoint(_) | TrainingError::MissingCheckpoint => {
                CliError::Io(e.to_string())
            }
            TrainingError::NumericFailure { .. }
            | TrainingError::Tensor(_)
            | TrainingError::Metrics(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.load_file(path).map_err(CliError::Config)?;
    }
    cfg.apply_overrides(&args.sets).map_err(CliError::Config)?;
    Ok(cfg)
}

/// Every file-producing run records the fully resolved configuration next to
/// its outputs; rerunning from that echo reproduces the run.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("run_config.txt"), cfg.render())?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { cfg, out, n, pd_fraction, seed } => cmd_synth(cfg, out, n, pd_fraction, seed),
        Command::Preprocess { cfg, manifest, out, workers } => {
            cmd_preprocess(cfg, manifest, out, workers)
        }
        Command::Train { cfg, features, out } => cmd_train(cfg, features, out),
        Command::Eval { cfg, checkpoints, features, report } => {
            cmd_eval(cfg, checkpoints, features, report)
        }
        Command::Predict { cfg, checkpoints, measurement } => {
            cmd_predict(cfg, checkpoints, measurement)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

fn cmd_synth(
    cfg: ConfigArgs,
    out: PathBuf,
    n: usize,
    pd_fraction: f64,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut run = resolve_config(&cfg)?;
    if let Some(seed) = seed {
        run.synth.seed = seed;
        run.train.seed = seed;
    }
    let manifest = synth::gen_dataset(n, pd_fraction, &run.synth, &out)?;
    echo_config(&run, &out)?;
    println!(
        "wrote {} measurements ({} damaged, {} healthy) to {}",
        manifest.len(),
        manifest.class_counts[1],
        manifest.class_counts[0],
        out.display()
    );
    Ok(())
}

struct LogRow {
    index: usize,
    id: String,
    status: &'static str,
    pos_peaks: usize,
    neg_peaks: usize,
    detail: String,
}

fn preprocess_one(
    entry: &ManifestEntry,
    run: &RunConfig,
    out: &Path,
    index: usize,
) -> LogRow {
    let result = signal_io::read_measurement(&entry.path, entry)
        .map_err(|e| (true, e.to_string()))
        .and_then(|m| {
            preprocess::extract_pulse_sets(&m, &run.preprocess)
                .map(|sets| (m, sets))
                .map_err(|e| (false, e.to_string()))
        })
        .and_then(|(m, (pos, neg))| {
            let features = preprocess::features_from_pulse_sets(&m.id, m.label, &pos, &neg);
            let path = out.join(format!("{}.pdcf", m.id));
            signal_io::write_features(&path, &features)
                .map(|()| (pos.n_real_peaks, neg.n_real_peaks))
                .map_err(|e| (true, e.to_string()))
        });
    match result {
        Ok((pos_peaks, neg_peaks)) => LogRow {
            index,
            id: entry.id.clone(),
            status: "ok",
            pos_peaks,
            neg_peaks,
            detail: String::new(),
        },
        Err((is_io, detail)) => LogRow {
            index,
            id: entry.id.clone(),
            status: if is_io { "io_error" } else { "numeric_error" },
            pos_peaks: 0,
            neg_peaks: 0,
            detail,
        },
    }
}

fn cmd_preprocess(
    cfg: ConfigArgs,
    manifest_path: PathBuf,
    out: PathBuf,
    workers: usize,
) -> Result<(), CliError> {
    let run = resolve_config(&cfg)?;
    run.preprocess
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let manifest = signal_io::load_manifest(&manifest_path)?;
    std::fs::create_dir_all(&out)?;
    echo_config(&run, &out)?;

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<LogRow>> = Mutex::new(Vec::with_capacity(manifest.len()));
    let workers = workers.max(1).min(manifest.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(entry) = manifest.entries.get(i) else {
                    break;
                };
                let row = preprocess_one(entry, &run, &out, i);
                eprintln!(
                    "preprocess {}: {} (pos {}, neg {})",
                    row.id, row.status, row.pos_peaks, row.neg_peaks
                );
                rows.lock().expect("log mutex").push(row);
            });
        }
    });

    let mut rows = rows.into_inner().expect("log mutex");
    rows.sort_by_key(|r| r.index);
    let mut log = String::from("id,status,pos_peaks,neg_peaks,detail\n");
    for r in &rows {
        log.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            r.status,
            r.pos_peaks,
            r.neg_peaks,
            r.detail.replace([',', '\n'], ";")
        ));
    }
    std::fs::write(out.join("preprocess_log.csv"), log)?;

    let io_failures = rows.iter().filter(|r| r.status == "io_error").count();
    let numeric_failures = rows.iter().filter(|r| r.status == "numeric_error").count();
    println!(
        "preprocessed {} of {} measurements ({} failed)",
        rows.len() - io_failures - numeric_failures,
        rows.len(),
        io_failures + numeric_failures
    );
    if io_failures > 0 {
        return Err(CliError::Io(format!("{io_failures} measurements failed on I/O")));
    }
    if numeric_failures > 0 {
        return Err(CliError::Numeric(format!(
            "{numeric_failures} measurements failed numerically"
        )));
    }
    Ok(())
}

fn load_features_checked(
    dir: &Path,
    run: &RunConfig,
) -> Result<Vec<dualcycon::signal_io::MeasurementFeatures>, CliError> {
    let features = signal_io::read_features_dir(dir)?;
    if features.is_empty() {
        return Err(CliError::Io(format!("no .pdcf files in {}", dir.display())));
    }
    let p = &run.preprocess;
    for f in &features {
        if f.n_p() != p.n_p || f.w_t() != p.w_t || f.f_bins() != p.f_bins() {
            return Err(CliError::Config(format!(
                "feature file {} is {}x{}/{}x{}, config expects {}x{}/{}x{}",
                f.id,
                f.n_p(),
                f.w_t(),
                f.n_p(),
                f.f_bins(),
                p.n_p,
                p.w_t,
                p.n_p,
                p.f_bins(),
            )));
        }
    }
    Ok(features)
}

fn cmd_train(cfg: ConfigArgs, features_dir: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let run = resolve_config(&cfg)?;
    let features = load_features_checked(&features_dir, &run)?;
    let model_cfg = run.model_config();
    // Surface geometry problems before any training work happens.
    model_cfg.plan()?;
    std::fs::create_dir_all(&out)?;
    echo_config(&run, &out)?;

    let results = training::run_cross_validation(&features, &model_cfg, &run.train, &out)?;
    for r in &results {
        println!(
            "fold {}: best validation MCC {:.4} -> {}",
            r.fold_id,
            r.best_val_mcc,
            r.checkpoint_path.display()
        );
    }
    Ok(())
}

fn collect_checkpoints(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Io(format!("{} does not exist", path.display())));
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ckpt"))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::Io(format!("no .ckpt files in {}", path.display())));
    }
    Ok(found)
}

fn cmd_eval(
    cfg: ConfigArgs,
    checkpoints: PathBuf,
    features_dir: PathBuf,
    report_path: PathBuf,
) -> Result<(), CliError> {
    let run = resolve_config(&cfg)?;
    let features = load_features_checked(&features_dir, &run)?;
    let paths = collect_checkpoints(&checkpoints)?;
    let report = training::evaluate(
        &paths,
        &features,
        &run.model_config(),
        run.train.threshold,
        run.train.batch_size,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Io(format!("report serialization: {e}")))?;
    std::fs::write(&report_path, &json)?;
    let echo = report_path.with_extension("config.txt");
    std::fs::write(&echo, run.render())?;
    println!(
        "evaluated {} measurements over {} folds: MCC {:.4}, F1 {:.4} -> {}",
        report.n_samples,
        report.per_fold.len(),
        report.overall.mcc,
        report.overall.f1,
        report_path.display()
    );
    Ok(())
}

fn cmd_predict(
    cfg: ConfigArgs,
    checkpoints: PathBuf,
    measurement: PathBuf,
) -> Result<(), CliError> {
    let run = resolve_config(&cfg)?;
    let id = measurement
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "measurement".into());
    let entry = ManifestEntry { id, path: measurement.clone(), label: 0 };
    let raw = signal_io::read_measurement(&measurement, &entry)?;
    let features = preprocess::preprocess_measurement(&raw, &run.preprocess)?;

    let paths = collect_checkpoints(&checkpoints)?;
    let model_cfg = run.model_config();
    let mut head_sums: [Option<f64>; 6] = [None; 6];
    let mut final_sum = 0.0;
    for path in &paths {
        let ckpt = read_checkpoint(path).map_err(|e| CliError::Io(e.to_string()))?;
        let mut model = DualCyConNet::from_checkpoint(model_cfg.clone(), &ckpt)?;
        let mut g = Graph::new();
        let pass = model
            .forward(&mut g, &[&features], Mode::Eval)
            .map_err(CliError::from)?;
        let out = &pass.outputs;
        for (slot, head) in head_sums.iter_mut().zip([
            out.p_jp, out.p_jn, out.p_tp, out.p_tn, out.p_fp, out.p_fn,
        ]) {
            if let Some(h) = head {
                *slot = Some(slot.unwrap_or(0.0) + g.data(h)[0]);
            }
        }
        final_sum += dualcycon::model::predict(&g, out)[0];
    }
    let k = paths.len() as f64;
    let names = ["p_jp", "p_jn", "p_tp", "p_tn", "p_fp", "p_fn"];
    for (name, sum) in names.iter().zip(head_sums) {
        if let Some(sum) = sum {
            println!("{name} = {:.6}", sum / k);
        }
    }
    println!("p_final = {:.6}", final_sum / k);
    Ok(())
}
