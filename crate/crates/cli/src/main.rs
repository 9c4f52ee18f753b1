//! `hsgcast`: generate synthetic cities, train, evaluate, forecast and
//! gradient-check the joint air-quality and weather forecaster.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hsgcast_core::data::io::{format_timestamp, parse_timestamp, read_dataset, write_dataset};
use hsgcast_core::data::synthetic::{generate, SyntheticConfig};
use hsgcast_core::data::{Split, SplitName};
use hsgcast_core::geo::StationKind;
use hsgcast_core::tensor::GRAD_FLOOR;
use hsgcast_core::training::{fit, persistence_report, Ablation, Forecaster, GradScale, StatsRecord};
use hsgcast_core::Error;
use serde_json::json;
use thiserror::Error;

use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATS_FILE: &str = "stats.jsonl";
pub const REPORT_FILE: &str = "metrics.json";
pub const TEST_CSV_FILE: &str = "metrics_test.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

const ABLATION_HELP: &str = "Component to remove or simplify (repeatable):
  no-spatial-disc   drop the spatial (per-snapshot) discriminator
  no-temporal-disc  drop the temporal (per-station sequence) discriminator
  no-macro-disc     drop the city-wide discriminator
  no-adversarial    plain predictive-loss training, no discriminators
  fixed-weights     keep the first iteration's discriminator weights
  avg-weights       weight every discriminator equally";

#[derive(Debug, Parser)]
#[command(name = "hsgcast", version, about = "Joint air-quality and weather forecasting on a heterogeneous station graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a synthetic city and write it as a dataset directory.
    GenerateData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "stations-air", default_value_t = 8)]
        stations_air: usize,
        #[arg(long = "stations-weather", default_value_t = 4)]
        stations_weather: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long = "context-dim", default_value_t = 8)]
        context_dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoint, statistics and metrics.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; overrides the config file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "ablate", value_name = "NAME", long_help = ABLATION_HELP)]
        ablate: Vec<String>,
        /// Output directory; overrides the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics CSV path; defaults to `metrics_<split>.csv` beside the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Forecast from one origin and export attention weights.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Last observed timestamp.
        #[arg(long)]
        at: String,
        #[arg(long)]
        horizon: usize,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every model parameter.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        scale: String,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenerateData { seed, stations_air, stations_weather, steps, context_dim, out, force } => {
            let cfg = SyntheticConfig {
                seed,
                air_stations: stations_air,
                weather_stations: stations_weather,
                steps,
                context_dim,
                ..SyntheticConfig::default()
            };
            generate_data(&cfg, &out, force)
        }
        Command::Train { config, data, ablate, out } => train(config, data, &ablate, out),
        Command::Evaluate { checkpoint, data, split, csv } => evaluate(&checkpoint, &data, &split, csv),
        Command::Predict { checkpoint, data, at, horizon, out } => predict(&checkpoint, &data, &at, horizon, out),
        Command::Gradcheck { scale, h, tolerance } => gradcheck(&scale, h, tolerance),
    }
}

fn generate_data(cfg: &SyntheticConfig, out: &Path, force: bool) -> Result<(), CliError> {
    cfg.validate()?;
    if !force && out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let (ds, manifest) = generate(cfg)?;
    write_dataset(out, &ds, Some(&manifest))?;
    println!(
        "wrote {} air and {} weather stations over {} hours to {}",
        ds.count(StationKind::Air),
        ds.count(StationKind::Weather),
        ds.steps(),
        out.display()
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<hsgcast_core::data::Dataset, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

fn train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    ablate: &[String],
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut run = match &config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for name in ablate {
        let a: Ablation = name.parse()?;
        if !run.train.ablations.contains(&a) {
            run.train.ablations.push(a);
        }
    }
    run.train.validate()?;
    let data = data
        .or(run.data.clone())
        .ok_or_else(|| CliError::Usage("no dataset given; pass --data or set `data` in the config".into()))?;
    let out = out
        .or(run.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory given; pass --out or set `out` in the config".into()))?;
    let ds = load_data(&data)?;
    fs::create_dir_all(&out)?;

    let mut stats = std::io::BufWriter::new(fs::File::create(out.join(STATS_FILE))?);
    let mut write_err = None;
    let started = Instant::now();
    let result = fit(&ds, &run.train, |rec| {
        if let StatsRecord::Epoch(e) = rec {
            println!(
                "epoch {:>3}  val air MAE {:.4}  weather MAE {:.4}{}",
                e.epoch,
                e.validation.air.mae_overall,
                e.validation.weather.mae_overall,
                if e.best { "  *" } else { "" }
            );
        }
        let line = serde_json::to_string(rec).map_err(std::io::Error::other);
        if let Err(e) = line.and_then(|l| writeln!(stats, "{l}")) {
            write_err.get_or_insert(e);
        }
    });
    stats.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let output = result?;
    output.best.save(&out.join(CHECKPOINT_FILE))?;

    let split = Split::chronological(ds.steps());
    let cfg = &run.train;
    let val = output.best.evaluate(&ds, split.val.clone(), cfg.eval_stride)?;
    let test = output.best.evaluate(&ds, split.test.clone(), cfg.eval_stride)?;
    let persistence_test = persistence_report(&ds, split.test.clone(), cfg.history, cfg.horizon, cfg.eval_stride)?;
    let report = json!({
        "model": output.best.describe(),
        "ablations": cfg.ablations,
        "train_seconds": started.elapsed().as_secs_f64(),
        "validation": val,
        "test": test,
        "persistence_test": persistence_test,
    });
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join(TEST_CSV_FILE), test.to_csv()?)?;
    println!("test metrics (checkpoint from epoch {:?}):", output.best.epoch);
    print!("{}", test.table());
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, data: &Path, split: &str, csv: Option<PathBuf>) -> Result<(), CliError> {
    let name: SplitName = split.parse()?;
    let ds = load_data(data)?;
    let model = Forecaster::load(checkpoint, &ds)?;
    let range = Split::chronological(ds.steps()).range(name);
    let report = model.evaluate(&ds, range, model.config.eval_stride)?;
    print!("{}", report.table());
    let path = csv.unwrap_or_else(|| sibling(checkpoint, &format!("metrics_{split}.csv")));
    fs::write(&path, report.to_csv()?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn predict(checkpoint: &Path, data: &Path, at: &str, horizon: usize, out: Option<PathBuf>) -> Result<(), CliError> {
    let ds = load_data(data)?;
    let model = Forecaster::load(checkpoint, &ds)?;
    let ts = parse_timestamp(at)?;
    let last = ds.step_of(ts).ok_or_else(|| {
        CliError::Data(format!("timestamp {} is not an observed hour of the dataset", format_timestamp(ts)))
    })?;
    let (snaps, attention) = model.predict(&ds, last, horizon)?;
    let out = out.unwrap_or_else(|| sibling(checkpoint, ""));
    fs::create_dir_all(&out)?;

    let mut w = csv::Writer::from_path(out.join("forecast.csv")).map_err(|e| CliError::Data(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(["step", "timestamp", "station_id", "kind", "variable", "value"]).map_err(csv_err)?;
    for (s, snap) in snaps.iter().enumerate() {
        let stamp = format_timestamp(hsgcast_core::data::io::hours_after(ts, s + 1));
        for kind in StationKind::ALL {
            let k = kind.index();
            for (i, id) in ds.ids(kind).iter().enumerate() {
                for (v, var) in ds.variables[k].iter().enumerate() {
                    w.write_record([
                        &(s + 1).to_string(),
                        &stamp,
                        *id,
                        kind.as_str(),
                        var,
                        &snap[k][[i, v]].to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("attention.csv")).map_err(csv_err)?;
    for rec in &attention {
        w.serialize(rec).map_err(csv_err)?;
    }
    w.flush()?;
    println!(
        "forecast of {horizon} steps after {} written to {}",
        format_timestamp(ts),
        out.display()
    );
    Ok(())
}

fn gradcheck(scale: &str, h: f64, tolerance: f64) -> Result<(), CliError> {
    let scale: GradScale = scale.parse()?;
    let started = Instant::now();
    let checks = hsgcast_core::training::gradient_suite(&scale, h)?;
    let mut worst: f64 = 0.0;
    println!("scale {scale:?}, h = {h:e}, derivative floor {GRAD_FLOOR:e}");
    for c in &checks {
        let r = &c.report;
        let at = r.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
        println!(
            "{:<48} {:>6} coords  max rel err {:.3e}  at {at}",
            c.objective, r.coordinates, r.max_relative_error
        );
        worst = worst.max(r.max_relative_error);
    }
    println!("max relative error {worst:.3e} (tolerance {tolerance:e}) in {:.1?}", started.elapsed());
    if worst < tolerance {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {worst:e} exceeds {tolerance:e}")))
    }
}
