//! Benchmark harness for the beamforming pipeline: train models, sweep SNR
//! against the classical baselines on shared channel batches, run the
//! training-strategy ablations, and measure per-scheme inference latency.
//!
//! Outputs are CSV tables plus a JSON manifest echoing the full
//! configuration and seeds, so every run can be reproduced from its output
//! directory alone. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure, 4 I/O error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use beamopt::baselines::{mmse_beamformer, mrt_beamformer, wmmse};
use beamopt::channel::{derive_seed, make_batch, SystemConfig};
use beamopt::error::Error;
use beamopt::objectives::sum_rate;
use beamopt::stack::rollout;
use beamopt::trainer::{train, RunConfig, TAG_SWEEP_BATCH};
use beamopt::{Batch64, Model64};

const TAG_TIME_BATCH: u32 = 5;
const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "beamopt", version, about = "Learning-to-optimize downlink beamforming harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate mmse/mrt/wmmse/l2o over an SNR sweep on shared batches.
    Sweep(SweepArgs),
    /// Run the proposed recipe plus the no_cl/no_pga/end_to_end ablations.
    Ablate(AblateArgs),
    /// Median per-sample inference latency per scheme.
    Time(TimeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration (system + model + train sections).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, metrics.csv, and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Forces determinism mode (zeroed wallclock column, reproducible CSVs).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Trained checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated SNR list in dB.
    #[arg(long, default_value = "0,5,10,15,20", value_delimiter = ',')]
    snr: Vec<f64>,
    /// Samples per SNR point (each scheme sees the identical batch).
    #[arg(long, default_value_t = 500)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Zeroes the timing column so CSV bodies are bit-reproducible.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Shared seed for all four runs (defaults to the config seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct TimeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples per repetition.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Timed repetitions (medians over these; a warm-up run is excluded).
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Channel SNR in dB (defaults to the checkpoint's training SNR).
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Time(a) => cmd_time(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::Checkpoint { .. } => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let run: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
        field: "config".into(),
        detail: format!("{}: {e}", path.display()),
    })?;
    run.validate()?;
    Ok(run)
}

fn write_manifest(dir: &Path, body: serde_json::Value) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&body).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let mut run = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    if a.deterministic {
        run.train.deterministic = true;
    }
    write_manifest(
        &a.out,
        json!({
            "command": "train",
            "build": BUILD_ID,
            "config": run,
            "seed": run.train.seed,
        }),
    )?;
    let outcome = train::<f64>(&run, Some(&a.out))?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final train objective {:.6}; final test mean rate {}",
        last.epoch,
        last.train_objective,
        outcome
            .final_test_mean_rate
            .map(|r| format!("{r:.6}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    println!("checkpoint: {}", a.out.join("model.ckpt").display());
    Ok(())
}

/// Loads a checkpoint plus the run config echoed into it at save time.
fn load_model(path: &Path) -> Result<(Model64, RunConfig), Error> {
    let (model, extra) = Model64::load(path)?;
    let run: RunConfig =
        serde_json::from_value(extra.get("run").cloned().unwrap_or_default()).map_err(|e| {
            Error::Checkpoint {
                detail: format!("checkpoint carries no usable run config: {e}"),
            }
        })?;
    if run.effective_model() != model.cfg {
        return Err(Error::Checkpoint {
            detail: "checkpoint model config does not match its run echo".into(),
        });
    }
    Ok((model, run))
}

struct SchemeStats {
    mean: f64,
    std: f64,
    per_sample_s: f64,
}

fn stats(rates: &[f64], seconds: f64) -> SchemeStats {
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    SchemeStats { mean, std: var.sqrt(), per_sample_s: seconds / n }
}

fn eval_scheme(name: &str, batch: &Batch64, model: &Model64) -> Result<SchemeStats, Error> {
    let start = Instant::now();
    let rates: Vec<f64> = match name {
        "mmse" => batch
            .samples
            .iter()
            .map(|s| mmse_beamformer(s, s.cfg.power).map(|w| sum_rate(s, &w)))
            .collect::<Result<_, _>>()?,
        "mrt" => batch.samples.iter().map(|s| sum_rate(s, &mrt_beamformer(s, s.cfg.power))).collect(),
        "wmmse" => batch
            .samples
            .iter()
            .map(|s| {
                wmmse(s, s.cfg.power, 500, 1e-5)
                    .map(|r| *r.objective_trace.last().expect("trace non-empty"))
            })
            .collect::<Result<_, _>>()?,
        "l2o" => batch
            .samples
            .iter()
            .map(|s| rollout(s, model, model.blocks.len()).map(|t| t.final_rate()))
            .collect::<Result<_, _>>()?,
        other => return Err(Error::Contract { detail: format!("unknown scheme {other}") }),
    };
    Ok(stats(&rates, start.elapsed().as_secs_f64()))
}

const SCHEMES: [&str; 4] = ["mmse", "mrt", "wmmse", "l2o"];

fn cmd_sweep(a: SweepArgs) -> Result<(), Error> {
    if a.batch == 0 {
        return Err(Error::Config { field: "batch".into(), detail: "must be >= 1".into() });
    }
    let (model, run) = load_model(&a.checkpoint)?;
    write_manifest(
        &a.out,
        json!({
            "command": "sweep",
            "build": BUILD_ID,
            "checkpoint": a.checkpoint,
            "config": run,
            "seed": a.seed,
            "snr_db": a.snr,
            "batch": a.batch,
            "deterministic": a.deterministic,
        }),
    )?;
    let mut csv = String::from("scheme,snr_db,mean_rate,std_rate,per_sample_s\n");
    let mut report = Vec::new();
    for (si, &snr) in a.snr.iter().enumerate() {
        let system = SystemConfig::from_snr(
            run.system.k,
            run.system.n,
            run.system.power,
            run.system.sigma_h2,
            snr,
        );
        let seed = derive_seed(a.seed, TAG_SWEEP_BATCH, si as u64);
        // One batch per SNR point, shared bit-identically by every scheme.
        let batch: Batch64 = make_batch(&system, run.train.normalization, seed, a.batch);
        for scheme in SCHEMES {
            let s = eval_scheme(scheme, &batch, &model)?;
            let t = if a.deterministic { 0.0 } else { s.per_sample_s };
            csv.push_str(&format!("{scheme},{snr},{},{},{t}\n", s.mean, s.std));
            report.push(json!({
                "scheme": scheme,
                "snr_db": snr,
                "mean_rate": s.mean,
                "std_rate": s.std,
                "per_sample_s": t,
                "batch_seed": seed,
            }));
            println!("snr {snr:>5.1} dB  {scheme:<5}  mean {:.4}  std {:.4}", s.mean, s.std);
        }
    }
    std::fs::write(a.out.join("sweep.csv"), &csv)?;
    std::fs::write(
        a.out.join("sweep.json"),
        serde_json::to_string_pretty(&json!({"build": BUILD_ID, "rows": report}))
            .expect("report serializes"),
    )?;
    println!("wrote {}", a.out.join("sweep.csv").display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Error> {
    let mut base = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        base.train.seed = seed;
    }
    if a.deterministic {
        base.train.deterministic = true;
    }
    write_manifest(
        &a.out,
        json!({
            "command": "ablate",
            "build": BUILD_ID,
            "config": base,
            "seed": base.train.seed,
        }),
    )?;
    let variants: [(&str, fn(&mut RunConfig)); 4] = [
        ("proposed", |_| {}),
        ("no_cl", |r| r.train.no_cl = true),
        ("no_pga", |r| r.train.no_pga = true),
        ("end_to_end", |r| r.train.end_to_end = true),
    ];
    let mut summary = String::from("variant,final_test_mean_rate\n");
    for (name, tweak) in variants {
        let mut run = base.clone();
        tweak(&mut run);
        let dir = a.out.join(name);
        let outcome = train::<f64>(&run, Some(&dir))?;
        let rate = outcome.final_test_mean_rate.unwrap_or(f64::NAN);
        summary.push_str(&format!("{name},{rate}\n"));
        println!("{name:<11} final test mean rate {rate:.6}");
    }
    std::fs::write(a.out.join("summary.csv"), &summary)?;
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn cmd_time(a: TimeArgs) -> Result<(), Error> {
    if a.reps == 0 {
        return Err(Error::Config { field: "reps".into(), detail: "must be >= 1".into() });
    }
    if a.reps == 1 {
        eprintln!("warning: a single repetition makes the reported medians unstable");
    }
    let (model, run) = load_model(&a.checkpoint)?;
    let system = match a.snr {
        Some(snr) => SystemConfig::from_snr(
            run.system.k,
            run.system.n,
            run.system.power,
            run.system.sigma_h2,
            snr,
        ),
        None => run.system,
    };
    let seed = derive_seed(a.seed, TAG_TIME_BATCH, 0);
    let batch: Batch64 = make_batch(&system, run.train.normalization, seed, a.batch);
    write_manifest(
        &a.out,
        json!({
            "command": "time",
            "build": BUILD_ID,
            "checkpoint": a.checkpoint,
            "config": run,
            "snr_db": system.snr_db(),
            "seed": a.seed,
            "batch": a.batch,
            "reps": a.reps,
        }),
    )?;
    let mut csv = String::from("scheme,reps,batch,median_per_sample_s,mean_rate\n");
    for scheme in SCHEMES {
        // Warm-up pass excluded from the medians.
        let _ = eval_scheme(scheme, &batch, &model)?;
        let mut times = Vec::with_capacity(a.reps);
        let mut mean_rate = 0.0;
        for _ in 0..a.reps {
            let s = eval_scheme(scheme, &batch, &model)?;
            times.push(s.per_sample_s);
            mean_rate = s.mean;
        }
        let med = median(&mut times);
        csv.push_str(&format!("{scheme},{},{},{med},{mean_rate}\n", a.reps, a.batch));
        println!("{scheme:<5}  median per-sample {med:.6} s  (mean rate {mean_rate:.4})");
    }
    std::fs::write(a.out.join("latency.csv"), &csv)?;
    println!("wrote {}", a.out.join("latency.csv").display());
    Ok(())
}
