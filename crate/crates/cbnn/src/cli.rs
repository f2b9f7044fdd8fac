//! Pipeline driver behind the `cbnn` binary.
//!
//! Subcommands cover the whole workflow: dataset conversion, training,
//! evaluation, slice-sensitivity analysis, compact rebuild, the analytic cost
//! model and the kernel benchmark. Every run echoes its fully-resolved
//! configuration to stderr so results are reproducible from logs alone.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure (divergence).

use crate::bench::bench_gemm;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data::{read_records, write_bitsliced_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{cost_model, ArchitectureSpec, InferenceModel};
use crate::rebuild::{rebuild_and_retrain, report_text};
use crate::rng::derive_rng;
use crate::sensitivity::{analyze_single, analyze_stack, report_csv, SensitivityConfig};
use crate::tensor::DenseTensor;
use crate::training::{
    evaluate_dataset, history_csv, train, InputMode, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Optional config-file overrides; flat key/value sections, unknown keys are
/// rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    sensitivity: SensitivitySection,
    #[serde(default)]
    bench: BenchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    lambda: Option<f64>,
    learning_rate: Option<f64>,
    lr_decay: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensitivitySection {
    trials: Option<usize>,
    err_threshold: Option<f64>,
    err_ref: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchSection {
    reps: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(name = "cbnn", about = "Compact binarized network pipeline", version)]
struct Cli {
    /// Config file with per-module overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for all randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output path for the produced artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Geometry of a planar record file.
#[derive(Debug, Args)]
struct Geometry {
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

impl Geometry {
    fn load(&self, path: &Path) -> Result<LabeledDataset> {
        read_records(path, self.width, self.height, self.channels, self.classes)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a planar record file to a bit-sliced dataset file.
    Convert {
        /// Input record file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        geometry: Geometry,
    },
    /// Train a network on bit-sliced input and write a checkpoint.
    Train {
        /// Architecture text file.
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Validation record file; defaults to the training file.
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        geometry: Geometry,
        /// Slices to drop from the input (1-based).
        #[arg(long, value_delimiter = ',')]
        prune: Vec<usize>,
    },
    /// Evaluate a checkpoint on a record file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        geometry: Geometry,
    },
    /// Measure per-slice or stacked-slice sensitivity of a checkpoint.
    Sensitivity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        geometry: Geometry,
        /// "single" or "stack".
        #[arg(long, default_value = "stack")]
        mode: String,
    },
    /// Full compression pipeline: sensitivity, shrink, retrain, report.
    Rebuild {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        geometry: Geometry,
    },
    /// Print the analytic size/GOPs cost of an architecture file.
    Cost {
        #[arg(long)]
        arch: PathBuf,
        /// Bit width of non-binary (first-layer) weights in the size model.
        #[arg(long, default_value_t = 16)]
        weight_bits: u64,
    },
    /// Benchmark packed vs dense kernels, or two architectures end to end.
    Bench {
        /// Kernel dims as m,k,n.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        dims: Option<Vec<usize>>,
        /// Compare end-to-end inference of two architecture files instead.
        #[arg(long, requires = "compact_arch")]
        base_arch: Option<PathBuf>,
        #[arg(long, requires = "base_arch")]
        compact_arch: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MalformedConfig(_) => 1,
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::MalformedConfig(e.to_string()))
}

fn train_config(file: &FileConfig, seed: u64) -> TrainConfig {
    let defaults = TrainConfig::default();
    let s = &file.train;
    TrainConfig {
        lambda: s.lambda.unwrap_or(defaults.lambda),
        learning_rate: s.learning_rate.unwrap_or(defaults.learning_rate),
        lr_decay: s.lr_decay.unwrap_or(defaults.lr_decay),
        epochs: s.epochs.unwrap_or(defaults.epochs),
        batch_size: s.batch_size.unwrap_or(defaults.batch_size),
        seed,
    }
}

fn sensitivity_config(file: &FileConfig, seed: u64) -> SensitivityConfig {
    let defaults = SensitivityConfig::default();
    let s = &file.sensitivity;
    SensitivityConfig {
        trials: s.trials.unwrap_or(defaults.trials),
        err_threshold: s.err_threshold.unwrap_or(defaults.err_threshold),
        err_ref: s.err_ref,
        seed,
    }
}

fn write_artifact(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content).map_err(Error::from),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn required_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| Error::MalformedConfig("this subcommand requires --out".into()))
}

fn run_command(cli: &Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Convert { data, geometry } => {
            let ds = geometry.load(data)?;
            let mut buf = Vec::new();
            write_bitsliced_dataset(&mut buf, &ds)?;
            fs::write(required_out(out)?, buf)?;
            eprintln!(
                "converted {} images to {} bit-sliced channels",
                ds.len(),
                geometry.channels * crate::bitslice::slice_count_for(ds.magnitude_bound)
            );
        }
        Command::Train {
            arch,
            data,
            val,
            geometry,
            prune,
        } => {
            let arch = ArchitectureSpec::from_text(&fs::read_to_string(arch)?)?;
            let train_ds = geometry.load(data)?;
            let val_ds = match val {
                Some(p) => geometry.load(p)?,
                None => train_ds.clone(),
            };
            let config = train_config(&file, cli.seed);
            eprintln!(
                "train: arch={} epochs={} batch_size={} learning_rate={} lr_decay={} lambda={} seed={} prune={prune:?}",
                arch.name,
                config.epochs,
                config.batch_size,
                config.learning_rate,
                config.lr_decay,
                config.lambda,
                config.seed
            );
            let mode = InputMode::BitSliced { prune: prune.clone() };
            let result = train(&arch, &config, &train_ds, &val_ds, &mode)?;
            let final_err = result.history.last().map(|h| h.val_err as f32);
            let ckpt_path = required_out(out)?;
            save_checkpoint(
                ckpt_path,
                &arch,
                &result.state.params,
                &CheckpointMeta {
                    seed: config.seed,
                    epochs: config.epochs as u32,
                    final_err: final_err.unwrap_or(f32::NAN),
                },
            )?;
            fs::write(
                ckpt_path.with_extension("history.csv"),
                history_csv(&result.history),
            )?;
            if let Some(err) = final_err {
                println!("err={err:.2}");
            }
        }
        Command::Eval { ckpt, data, geometry } => {
            let (arch, params, _) = load_checkpoint(ckpt)?;
            let ds = geometry.load(data)?;
            let err = evaluate_dataset(&arch, &params, &ds, &InputMode::BitSliced { prune: vec![] })?;
            println!("err={err:.2}");
        }
        Command::Sensitivity {
            ckpt,
            data,
            geometry,
            mode,
        } => {
            let (arch, params, _) = load_checkpoint(ckpt)?;
            let model = InferenceModel::from_params(&arch, &params)?;
            let ds = geometry.load(data)?;
            let config = sensitivity_config(&file, cli.seed);
            eprintln!(
                "sensitivity: mode={mode} trials={} err_threshold={} seed={}",
                config.trials, config.err_threshold, config.seed
            );
            let report = match mode.as_str() {
                "single" => analyze_single(&model, &ds, &config)?,
                "stack" => analyze_stack(&model, &ds, &config)?,
                other => {
                    return Err(Error::MalformedConfig(format!(
                        "mode must be single or stack, got {other}"
                    )))
                }
            };
            write_artifact(out, &report_csv(&report))?;
        }
        Command::Rebuild {
            ckpt,
            data,
            val,
            geometry,
        } => {
            let (arch, params, _) = load_checkpoint(ckpt)?;
            let model = InferenceModel::from_params(&arch, &params)?;
            let train_ds = geometry.load(data)?;
            let val_ds = match val {
                Some(p) => geometry.load(p)?,
                None => train_ds.clone(),
            };
            let sens = sensitivity_config(&file, cli.seed);
            let report = analyze_stack(&model, &val_ds, &sens)?;
            eprintln!(
                "rebuild: prunable={:?} turning_point={:?}",
                report.prunable, report.turning_point
            );
            let config = train_config(&file, cli.seed);
            let outcome =
                rebuild_and_retrain(&arch, &params, &report.prunable, &train_ds, &val_ds, &config)?;
            if let Some(path) = out {
                save_checkpoint(
                    path,
                    &outcome.compact_arch,
                    &outcome.result.state.params,
                    &CheckpointMeta {
                        seed: config.seed,
                        epochs: config.epochs as u32,
                        final_err: outcome.report.compact_err as f32,
                    },
                )?;
            }
            print!(
                "{}",
                report_text(&outcome.report, &arch.name, &outcome.compact_arch.name)
            );
        }
        Command::Cost { arch, weight_bits } => {
            let arch = ArchitectureSpec::from_text(&fs::read_to_string(arch)?)?;
            let cost = cost_model(&arch, *weight_bits)?;
            println!("size_mb={:.2} gops={:.2}", cost.size_mb, cost.gops);
        }
        Command::Bench {
            dims,
            base_arch,
            compact_arch,
        } => {
            let reps = file.bench.reps.unwrap_or(10);
            if let (Some(base), Some(compact)) = (base_arch, compact_arch) {
                let line = bench_model_ratio(base, compact, reps, cli.seed)?;
                println!("{line}");
            } else {
                let d = dims.clone().unwrap_or_else(|| vec![512, 1024, 512]);
                let report = bench_gemm(d[0], d[1], d[2], reps, cli.seed)?;
                write_artifact(out, &crate::bench::report_csv(&[report]))?;
            }
        }
    }
    Ok(())
}

/// End-to-end inference timing of two architectures with random weights and
/// random binary inputs, against their analytic GOPs ratio.
fn bench_model_ratio(base: &Path, compact: &Path, reps: usize, seed: u64) -> Result<String> {
    let base = ArchitectureSpec::from_text(&fs::read_to_string(base)?)?;
    let compact = ArchitectureSpec::from_text(&fs::read_to_string(compact)?)?;
    let base_model =
        InferenceModel::from_params(&base, &crate::training::init_params(&base, seed)?)?;
    let compact_model =
        InferenceModel::from_params(&compact, &crate::training::init_params(&compact, seed)?)?;
    let batch = 32;
    let mut rng = derive_rng(seed, 0xbe4c);
    let mut input_for = |arch: &ArchitectureSpec| -> Result<DenseTensor> {
        let (w, h, c) = arch.input_shape;
        let vals: Vec<f64> = (0..batch * h * w * c)
            .map(|_| rng.random::<bool>() as u8 as f64)
            .collect();
        DenseTensor::from_vec(&[batch, h, w, c], vals)
    };
    let base_input = input_for(&base)?;
    let compact_input = input_for(&compact)?;
    // interleaved best-of-reps timing so background load hits both models
    // alike instead of whichever phase runs second
    base_model.forward_batch(&base_input)?;
    compact_model.forward_batch(&compact_input)?;
    let mut base_secs = f64::INFINITY;
    let mut compact_secs = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = std::time::Instant::now();
        std::hint::black_box(base_model.forward_batch(&base_input)?);
        base_secs = base_secs.min(t.elapsed().as_secs_f64());
        let t = std::time::Instant::now();
        std::hint::black_box(compact_model.forward_batch(&compact_input)?);
        compact_secs = compact_secs.min(t.elapsed().as_secs_f64());
    }
    let gops_ratio = cost_model(&base, 16)?.gops / cost_model(&compact, 16)?.gops;
    Ok(format!(
        "wall_ratio={:.3} gops_ratio={:.3}",
        base_secs / compact_secs,
        gops_ratio
    ))
}

/// Binary entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // ignore failure if a pool already exists (e.g. under tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run_command(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error code={} msg=\"{e}\"", exit_code(&e));
            exit_code(&e)
        }
    }
}
