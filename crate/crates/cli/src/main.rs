//! `mlla` command line: forward passes, toy training, evaluation,
//! parameter/FLOP accounting, data synthesis, the attention benchmark,
//! and the selftest gate.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlla_cli::bench::{render_text as bench_text, run_bench, BenchOptions};
use mlla_cli::config::load_config;
use mlla_cli::error::{CliError, Result};
use mlla_cli::eval::{evaluate, render_text as eval_text};
use mlla_cli::stf::{read_stf, write_stf, StfData};
use mlla_cli::synth::{gen_dataset, load_dataset, SynthSpec};
use mlla_cli::trainer::{load_checkpoint, save_checkpoint, train, TrainOptions};
use mlla_cli::selftest;
use mlla_core::attention::AttentionKind;
use mlla_core::network::build_model;
use mlla_core::Graph;

/// Seed resolution: explicit flag, else the MLLA_SEED environment
/// variable, else zero.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("MLLA_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

#[derive(Parser)]
#[command(name = "mlla", about = "Linear-attention segmentation workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// RNG seed (falls back to $MLLA_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one forward pass over an image tensor and write the logits.
    Forward {
        /// Preset name (tiny/small/base/toy/micro) or config JSON path
        #[arg(long)]
        config: String,
        /// Input image STF ([C, H, W] f32)
        #[arg(long)]
        input: PathBuf,
        /// Output logits STF path
        #[arg(long)]
        out: PathBuf,
        /// Optional checkpoint directory (otherwise seeded random weights)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: u16,
        #[arg(long, default_value_t = 0.2)]
        contrast: f64,
        #[arg(long, default_value_t = 0.04)]
        noise: f64,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train on a synthetic dataset with AdamW and a cosine schedule.
    TrainToy {
        #[arg(long, default_value = "toy")]
        config: String,
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        /// Disable the scaling/rotation augmentation
        #[arg(long, default_value_t = false)]
        no_augment: bool,
        /// Checkpoint output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Evaluate a checkpoint: per-class DSC and HD95.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark attention kernels across sequence lengths.
    Bench {
        /// Comma-separated subset of: linear, softmax
        #[arg(long, default_value = "linear,softmax")]
        kernels: String,
        /// Comma-separated sequence lengths (at least 5, increasing)
        #[arg(long, default_value = "1024,2048,4096,8192,16384")]
        n_list: String,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Report output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Parameter and FLOP accounting for a configuration.
    Params {
        #[arg(long, default_value = "tiny")]
        config: String,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Run the built-in verification suite.
    Selftest,
}

fn cmd_forward(
    config: String,
    input: PathBuf,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let model = match checkpoint {
        Some(dir) => load_checkpoint(&dir)?,
        None => build_model::<f32>(&load_config(&config)?, seed)?,
    };
    let image = read_stf(&input)?.as_f32()?.clone();
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != model.config.in_channels {
        return Err(CliError::Validation(format!(
            "expected [{}, H, W] image, got {:?}",
            model.config.in_channels, shape
        )));
    }
    let batched = image.reshape(vec![1, shape[0], shape[1], shape[2]])?;
    let mut g = Graph::new(&model.params);
    let img = g.tape.constant(batched)?;
    let logits = model.forward(&mut g, img)?;
    let ls = g.tape.shape(logits).to_vec();
    let single = g
        .tape
        .value(logits)
        .clone()
        .reshape(vec![ls[1], ls[2], ls[3]])?;
    write_stf(&out, &StfData::F32(single))?;
    println!(
        "forward: {} -> {} logits {:?}",
        input.display(),
        out.display(),
        &ls[1..]
    );
    Ok(())
}

fn cmd_train(
    config: String,
    data: PathBuf,
    steps: u64,
    batch: usize,
    lr: f64,
    weight_decay: f64,
    no_augment: bool,
    out: PathBuf,
    seed: u64,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let dataset = load_dataset(&data)?;
    let opts = TrainOptions {
        steps,
        batch,
        lr,
        weight_decay,
        lr_min: 1e-6,
        seed,
        augment: !no_augment,
    };
    let outcome = train(&cfg, &dataset, &opts)?;
    for entry in &outcome.log {
        println!(
            "step {:>5}  lr {:.3e}  total {:.5}  ce {:.5}  dice {:.5}",
            entry.step, entry.lr, entry.total, entry.ce, entry.dice
        );
    }
    fs::create_dir_all(&out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    save_checkpoint(&out, &outcome.model)?;
    let log_json = serde_json::json!({
        "config": cfg.name,
        "seed": seed,
        "steps": outcome.log,
    });
    let log_path = out.join("train_log.json");
    fs::write(
        &log_path,
        serde_json::to_string_pretty(&log_json)
            .map_err(|e| CliError::format("train_log", e.to_string()))?,
    )
    .map_err(|e| CliError::io(log_path.display().to_string(), e))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, data: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let model = load_checkpoint(&checkpoint)?;
    let dataset = load_dataset(&data)?;
    let report = evaluate(&model, &dataset)?;
    print!("{}", eval_text(&report));
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::format("eval_report", e.to_string()))?;
        fs::write(&path, json).map_err(|e| CliError::io(path.display().to_string(), e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn parse_kernels(spec: &str) -> Result<Vec<AttentionKind>> {
    spec.split(',')
        .map(|s| match s.trim() {
            "linear" => Ok(AttentionKind::Linear),
            "softmax" => Ok(AttentionKind::Softmax),
            other => Err(CliError::Validation(format!(
                "unknown kernel '{other}' (expected linear or softmax)"
            ))),
        })
        .collect()
}

fn parse_ns(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad sequence length '{s}'")))
        })
        .collect()
}

fn cmd_bench(
    kernels: String,
    n_list: String,
    dim: usize,
    reps: usize,
    out: PathBuf,
    seed: u64,
) -> Result<()> {
    let opts = BenchOptions {
        kernels: parse_kernels(&kernels)?,
        ns: parse_ns(&n_list)?,
        dim,
        reps,
        seed,
    };
    fs::create_dir_all(&out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    let reports = run_bench(&opts)?;
    for report in &reports {
        let text = bench_text(report);
        print!("{text}");
        let json = serde_json::to_string_pretty(report)
            .map_err(|e| CliError::format("bench_report", e.to_string()))?;
        let jpath = out.join(format!("bench_{}.json", report.kernel));
        fs::write(&jpath, json).map_err(|e| CliError::io(jpath.display().to_string(), e))?;
        let tpath = out.join(format!("bench_{}.txt", report.kernel));
        fs::write(&tpath, text).map_err(|e| CliError::io(tpath.display().to_string(), e))?;
    }
    println!("reports written to {}", out.display());
    Ok(())
}

/// Reference figures reported alongside the three full-size presets.
fn reference_figures(name: &str) -> Option<(f64, f64)> {
    match name {
        "tiny" => Some((34.14e6, 14.66e9)),
        "small" => Some((64.52e6, 26.30e9)),
        "base" => Some((144.5e6, 58.56e9)),
        _ => None,
    }
}

fn cmd_params(config: String, seed: u64) -> Result<()> {
    let cfg = load_config(&config)?;
    let model = build_model::<f32>(&cfg, seed)?;
    let total = model.count_params();
    let size = cfg.input_size;
    let macs = model.count_macs(size, size);
    println!("config: {}   input: {1}x{1}", cfg.name, size);
    println!("{:>10} {:>14}", "module", "params");
    for (name, count) in model.param_breakdown() {
        println!("{name:>10} {count:>14}");
    }
    println!("{:>10} {total:>14}", "total");
    println!(
        "multiply-adds: {macs}   flops(2/MAC): {}   flops(1/MAC): {macs}",
        2 * macs
    );
    if let Some((p_ref, f_ref)) = reference_figures(&cfg.name) {
        println!(
            "reference: {:.2}M params ({:+.2}%), {:.2} GFLOPs ({:+.2}% at 2/MAC)",
            p_ref / 1e6,
            (total as f64 - p_ref) / p_ref * 100.0,
            f_ref / 1e9,
            (2.0 * macs as f64 - f_ref) / f_ref * 100.0
        );
    }
    Ok(())
}

fn cmd_gen_data(
    out: PathBuf,
    count: usize,
    size: usize,
    classes: u16,
    contrast: f64,
    noise: f64,
    seed: u64,
) -> Result<()> {
    let mut spec = SynthSpec::new(size, classes)?;
    spec.contrast = contrast;
    spec.noise_std = noise;
    gen_dataset(&out, seed, count, &spec)?;
    println!(
        "wrote {count} samples ({size}x{size}, {classes} classes) to {}",
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Forward {
            config,
            input,
            out,
            checkpoint,
            seed,
        } => cmd_forward(config, input, out, checkpoint, resolve_seed(seed.seed)),
        Command::GenData {
            out,
            count,
            size,
            classes,
            contrast,
            noise,
            seed,
        } => cmd_gen_data(out, count, size, classes, contrast, noise, resolve_seed(seed.seed)),
        Command::TrainToy {
            config,
            data,
            steps,
            batch,
            lr,
            weight_decay,
            no_augment,
            out,
            seed,
        } => cmd_train(
            config,
            data,
            steps,
            batch,
            lr,
            weight_decay,
            no_augment,
            out,
            resolve_seed(seed.seed),
        ),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(checkpoint, data, out),
        Command::Bench {
            kernels,
            n_list,
            dim,
            reps,
            out,
            seed,
        } => cmd_bench(kernels, n_list, dim, reps, out, resolve_seed(seed.seed)),
        Command::Params { config, seed } => cmd_params(config, resolve_seed(seed.seed)),
        Command::Selftest => {
            if selftest::run() > 0 {
                return Err(CliError::Core(mlla_core::Error::Numeric(
                    "selftest failed".into(),
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
