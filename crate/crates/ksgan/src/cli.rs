//! Command-line surface: train models, sample checkpoints or targets,
//! evaluate metrics, run the half-normal demo, and emit 2D histograms.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numeric abort.
//! `KSGAN_THREADS` caps worker threads (default 1).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::hist::HistogramGrid;
use crate::io::{read_points_csv, write_points_csv};
use crate::losses::example1_statistics;
use crate::metrics::{ks_two_sample_1d, median_heuristic_bandwidth, mmd2};
use crate::rng::RngState;
use crate::targets::{analytic_pair_chi_gaussian, sample_target, TargetName};
use crate::tensor::Tensor;
use crate::trainer::{sample_model, train, NoopObserver, TrainConfig};

#[derive(Parser)]
#[command(name = "ksgan", version, about = "Generalized-KS adversarial training on 2D toy densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Sample a trained checkpoint or a named target into CSV.
    Sample(SampleArgs),
    /// Evaluate a metric between two point-set CSVs.
    Eval(EvalArgs),
    /// Half-normal vs standard-normal coverage statistics.
    DemoChiGaussian(DemoArgs),
    /// 2D count histogram of a point-set CSV.
    Hist(HistArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the JSON training config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, metrics.jsonl, resolved-config.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    /// Generator checkpoint to sample.
    #[arg(long, conflicts_with = "target", required_unless_present = "target")]
    checkpoint: Option<PathBuf>,
    /// Sample a named synthetic target instead of a checkpoint.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    n: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Mmd2,
    Ks1d,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(value_enum)]
    metric: Metric,
    /// First point-set CSV.
    #[arg(long)]
    a: PathBuf,
    /// Second point-set CSV.
    #[arg(long)]
    b: PathBuf,
    /// Kernel bandwidth: "auto" (median heuristic on the union) or a number.
    #[arg(long, default_value = "auto")]
    bandwidth: String,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 65536)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct HistArgs {
    /// Input point-set CSV.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    bins: usize,
    /// "auto" or "xmin,xmax,ymin,ymax".
    #[arg(long, default_value = "auto")]
    bounds: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = HistFormat::Csv)]
    format: HistFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum HistFormat {
    Csv,
    Pgm,
}

/// Worker-thread cap from KSGAN_THREADS (default 1).
pub fn worker_threads() -> usize {
    std::env::var("KSGAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DemoChiGaussian(args) => cmd_demo(args),
        Command::Hist(args) => cmd_hist(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let raw = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::io(format!("read config {}", args.config.display()), e))?;
    let mut config: TrainConfig = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        context: args.config.display().to_string(),
        reason: e.to_string(),
    })?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let config = config.resolved()?;
    train(&config, Some(&args.out), worker_threads(), &mut NoopObserver)?;
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let mut rng = RngState::seed_from_u64(args.seed);
    let set = match (&args.checkpoint, &args.target) {
        (Some(path), None) => sample_model(path, args.n, &mut rng)?,
        (None, Some(name)) => {
            let target: TargetName = name.parse()?;
            sample_target(target, args.n, &mut rng)?
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    write_points_csv(&args.out, &set.points)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let a = read_points_csv(&args.a)?;
    let b = read_points_csv(&args.b)?;
    if a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "eval".to_string(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let report = match args.metric {
        Metric::Mmd2 => {
            let bandwidth = match args.bandwidth.as_str() {
                "auto" => {
                    let mut union = a.data().to_vec();
                    union.extend_from_slice(b.data());
                    let union = Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], union)?;
                    median_heuristic_bandwidth(&union)?
                }
                v => v.parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!("--bandwidth must be 'auto' or a number, got '{v}'"))
                })?,
            };
            let r = mmd2(&a, &b, bandwidth, worker_threads())?;
            serde_json::json!({
                "metric": "mmd2",
                "value": r.mmd2,
                "bandwidth": r.bandwidth,
                "n_a": r.n_a,
                "n_b": r.n_b,
            })
        }
        Metric::Ks1d => {
            if a.shape()[1] != 1 {
                return Err(Error::InvalidShape(format!(
                    "ks1d expects 1-dimensional points, got dim {}",
                    a.shape()[1]
                )));
            }
            let v = ks_two_sample_1d(a.data(), b.data())?;
            serde_json::json!({
                "metric": "ks1d",
                "value": v,
                "bandwidth": null,
                "n_a": a.shape()[0],
                "n_b": b.shape()[0],
            })
        }
    };
    println!("{report}");
    Ok(())
}

fn cmd_demo(args: DemoArgs) -> Result<()> {
    if args.n < 1000 {
        return Err(Error::InvalidArgument(format!(
            "demo requires n >= 1000 for its advertised tolerances, got {}",
            args.n
        )));
    }
    let mut rng = RngState::seed_from_u64(args.seed);
    let (half, gauss) = analytic_pair_chi_gaussian(args.n, &mut rng)?;
    let stats = example1_statistics(half.points.data(), gauss.points.data())?;
    println!(
        "{}",
        serde_json::json!({
            "one_sided_sup": stats.one_sided_sup,
            "symmetric_gks": stats.symmetric_gks,
        })
    );
    Ok(())
}

fn cmd_hist(args: HistArgs) -> Result<()> {
    let points = read_points_csv(&args.input)?;
    let bounds = match args.bounds.as_str() {
        "auto" => None,
        spec => {
            let parts: Vec<f64> = spec
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::InvalidArgument(format!(
                        "--bounds must be 'auto' or 'xmin,xmax,ymin,ymax', got '{spec}'"
                    ))
                })?;
            let [xmin, xmax, ymin, ymax]: [f64; 4] = parts.try_into().map_err(|_| {
                Error::InvalidArgument("--bounds needs exactly 4 numbers".to_string())
            })?;
            Some([xmin, xmax, ymin, ymax])
        }
    };
    let (grid, oob) = HistogramGrid::build(&points, args.bins, bounds)?;
    if grid.total() == 0 {
        eprintln!("warning: all {oob} points fall outside the histogram bounds");
    }
    let bytes = match args.format {
        HistFormat::Csv => grid.to_csv().into_bytes(),
        HistFormat::Pgm => grid.to_pgm(),
    };
    std::fs::write(&args.out, bytes)
        .map_err(|e| Error::io(format!("write {}", args.out.display()), e))?;
    Ok(())
}
