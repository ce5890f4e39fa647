//! `dvse`: simulate corpora, train, evaluate, and run inference.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use dvse_core::checkpoint::{checkpoint_load, checkpoint_save, TrainingMetadata};
use dvse_core::config::RunConfig;
use dvse_core::evalkit::{evaluate_method, read_report, report_emit, trajectory_series, HorizonReport, Method};
use dvse_core::models::infer_autoregressive;
use dvse_core::simkit::{atomic_write, load_dataset, make_dataset, read_imu_csv, TrajectoryRecord};
use dvse_core::trainer::{append_metrics, train, SplitPlan};
use dvse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dvse", version, about = "Vehicle speed estimation from smartphone IMU data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the config's `dataset` section.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json, metrics.jsonl and split.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; defaults to the config's `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and the baselines; writes report files.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to the held-out trajectories of a split.json.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Horizons and stride come from this config when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print per-second speed for an IMU CSV as `t,speed`.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        imu: PathBuf,
        #[arg(long)]
        v0: f64,
    },
    /// Merge report.json files into one report.json / report.csv.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Train { config, data, out } => cmd_train(&config, data.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            out,
            split,
            config,
        } => cmd_eval(&ckpt, &data, &out, split.as_deref(), config.as_deref()),
        Command::Infer { ckpt, imu, v0 } => cmd_infer(&ckpt, &imu, v0),
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    }
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = cfg
        .dataset
        .ok_or_else(|| Error::InvalidArgument(format!("{}: missing `dataset` section", config.display())))?;
    let manifest = make_dataset(&ds, out)?;
    info!("wrote {} trajectories to {}", manifest.trajectories.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| Error::InvalidArgument("no dataset: pass --data or set `data_dir`".into()))?;
    let (_, records) = load_dataset(&data)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let metrics_path = out.join("metrics.jsonl");
    if metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(|e| Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
    }
    let outcome = train(&records, &cfg.model, &cfg.train, |m| append_metrics(&metrics_path, m))?;
    let meta = TrainingMetadata {
        seed: cfg.train.seed,
        epochs: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        final_val_loss: outcome.best_val_loss.is_finite().then_some(outcome.best_val_loss),
    };
    checkpoint_save(&outcome.model, meta, &out.join("checkpoint.json"))?;
    atomic_write(&out.join("split.json"), serde_json::to_string_pretty(&outcome.plan).map_err(|e| Error::Parse(e.to_string()))?.as_bytes())?;
    info!(
        "trained {} epochs (best {}), checkpoint in {}",
        outcome.epochs_run,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

fn load_split(path: &Path) -> Result<SplitPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, split: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let (model, _) = checkpoint_load(ckpt)?;
    let (_, records) = load_dataset(data)?;
    let eval_cfg = match config {
        Some(c) => RunConfig::load(c)?.eval,
        None => Default::default(),
    };
    let chosen: Vec<&TrajectoryRecord> = match split {
        Some(p) => {
            let plan = load_split(p)?;
            if plan.test_trajectories.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{}: split holds no whole test trajectories",
                    p.display()
                )));
            }
            plan.test_trajectories
                .iter()
                .map(|&i| {
                    records
                        .get(i)
                        .ok_or_else(|| Error::InvalidArgument(format!("split names trajectory {i}, dataset has {}", records.len())))
                })
                .collect::<Result<_>>()?
        }
        None => records.iter().collect(),
    };
    let methods = [
        Method::Model(&model),
        Method::RawIntegration { use_true_pose: false },
        Method::RawIntegration { use_true_pose: true },
        Method::ConstantVelocity,
    ];
    let mut reports = Vec::new();
    for m in methods {
        reports.extend(evaluate_method(m, &chosen, &eval_cfg.horizons, eval_cfg.stride_s)?);
    }
    let series = chosen.iter().map(|r| trajectory_series(&model, r)).collect::<Result<Vec<_>>>()?;
    report_emit(&reports, &series, out)?;
    for r in reports.iter().filter(|r| r.method == "dvse") {
        info!("{} s: velocity MAE {:.3} m/s, distance MAE {:.2} m", r.horizon, r.vel_mae, r.dist_mae);
    }
    Ok(())
}

fn cmd_infer(ckpt: &Path, imu: &Path, v0: f64) -> Result<()> {
    let (model, _) = checkpoint_load(ckpt)?;
    let stream = read_imu_csv(imu)?;
    stream.validate()?;
    let speeds = infer_autoregressive(&model, &stream, v0)?;
    let mut text = String::from("t,speed\n");
    for (k, v) in speeds.iter().enumerate() {
        text.push_str(&format!("{},{v:.6}\n", k + 1));
    }
    io::stdout().lock().write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut merged: Vec<HorizonReport> = Vec::new();
    for input in inputs {
        let file = if input.is_dir() { input.join("report.json") } else { input.clone() };
        let rep = read_report(&file)?;
        let label = input
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for mut r in rep.reports {
            if inputs.len() > 1 {
                r.method = format!("{label}/{}", r.method);
            }
            merged.push(r);
        }
    }
    report_emit(&merged, &[], out)
}
