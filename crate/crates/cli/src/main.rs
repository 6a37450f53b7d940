//! `radiant` — command-line front end for the probe/intervention pipeline.
//!
//! Subcommands: `gen-synthetic`, `fit`, `apply`, `eval`, `grid`. Machine
//! readable JSON goes to stdout; human logs go to stderr (level via
//! `--log-level` or the `RADIANT_LOG` environment variable). Exit codes:
//! 0 success, 1 runtime failure (with a structured JSON error on stdout),
//! 2 flag/usage errors.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use radiant_core::probes::{LossKind, Quality, RiskLossConfig};
use radiant_core::sdp::SolverOptions;
use radiant_core::simbench::{evaluate_pipeline, generate, grid_search, SynthSpec};
use radiant_core::steering::{apply_policy, fit_policy, load_bundle, save_bundle, FitConfig};
use radiant_core::tensors::{load_dataset, save_dataset};
use radiant_core::{Error, PolicyBundle, Real};

#[derive(Parser)]
#[command(
    name = "radiant",
    about = "Layerwise risk-aware probes and chance-constrained activation steering",
    version
)]
struct Cli {
    /// Worker threads for head-parallel stages (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,

    /// Seed for seeded stages that have no dedicated flag (probe init).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Log level for stderr diagnostics (overrides RADIANT_LOG).
    #[arg(long, global = true)]
    log_level: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic activation dataset (RADF v1).
    GenSynthetic(GenArgs),
    /// Fit a steering policy bundle from train/validation dumps.
    Fit(FitArgs),
    /// Apply a bundle to a dataset, writing the edited dataset.
    Apply(ApplyArgs),
    /// Evaluate a bundle end-to-end on a dataset.
    Eval(EvalArgs),
    /// Grid-search (alpha, gamma-factor) and report every point.
    Grid(GridArgs),
}

fn positive_real(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("value must be > 0".into())
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err("value must lie in (0, 1)".into())
    }
}

fn nonnegative_real(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("value must be ≥ 0".into())
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    samples: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    layers: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    heads: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    #[arg(long, value_parser = nonnegative_real)]
    separation: f64,
    #[arg(long)]
    seed: u64,
    /// Informative heads: "all" or comma-separated layer:head pairs.
    #[arg(long, default_value = "all")]
    informative: String,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    class_balance: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_real)]
    noise_cov_scale: f64,
}

#[derive(Args, Clone)]
struct FitFlags {
    /// False-negative weight α in the probe loss.
    #[arg(long, default_value_t = 2.5, value_parser = positive_real)]
    alpha: f64,
    /// Γ = Φ⁻¹(1 − γ) of the chance constraint.
    #[arg(long, default_value_t = 15.0, value_parser = positive_real)]
    gamma_factor: f64,
    /// Spectral floor S ⪰ Σ̂₀^{1/2} on the steered covariance.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    floor_cov: Toggle,
    /// Probe training loss.
    #[arg(long, value_enum, default_value_t = LossFlag::Risk)]
    loss: LossFlag,
    /// Layer-selection metric.
    #[arg(long, value_enum, default_value_t = QualityFlag::Risk)]
    quality: QualityFlag,
    #[arg(long, default_value_t = 1e-7, value_parser = positive_real)]
    feas_tol: f64,
    #[arg(long, default_value_t = 1e-6, value_parser = positive_real)]
    kkt_tol: f64,
    #[arg(long, default_value_t = 20_000, value_parser = clap::value_parser!(u64).range(1..))]
    max_iter: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON file of per-sample edit traces.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Comma-separated α grid.
    #[arg(long, default_value = "1.0,1.5,2.0,2.5")]
    alphas: String,
    /// Comma-separated Γ grid.
    #[arg(long, default_value = "5,7.5,10,15,20")]
    gamma_factors: String,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(ValueEnum, Clone, Copy, PartialEq)]
enum Toggle {
    On,
    Off,
}

#[derive(ValueEnum, Clone, Copy)]
enum LossFlag {
    Risk,
    Nll,
}

#[derive(ValueEnum, Clone, Copy)]
enum QualityFlag {
    Accuracy,
    Risk,
}

impl FitFlags {
    fn to_config(&self, seed: u64) -> FitConfig<Real> {
        FitConfig {
            risk: RiskLossConfig {
                alpha: self.alpha,
                loss_kind: match self.loss {
                    LossFlag::Risk => LossKind::RiskAware,
                    LossFlag::Nll => LossKind::WeightedNll,
                },
                seed,
                ..RiskLossConfig::default()
            },
            solver: SolverOptions {
                feas_tol: self.feas_tol,
                kkt_tol: self.kkt_tol,
                max_iter: self.max_iter as usize,
                ..SolverOptions::default()
            },
            gamma_factor: self.gamma_factor,
            use_floor: self.floor_cov == Toggle::On,
            quality: match self.quality {
                QualityFlag::Accuracy => Quality::Accuracy,
                QualityFlag::Risk => Quality::RiskScore,
            },
        }
    }
}

fn parse_informative(
    spec: &str,
    layers: usize,
    heads: usize,
) -> Result<BTreeSet<(usize, usize)>, Error> {
    if spec == "all" {
        return Ok((0..layers)
            .flat_map(|l| (0..heads).map(move |h| (l, h)))
            .collect());
    }
    let mut set = BTreeSet::new();
    for part in spec.split(',') {
        let (l, h) = part
            .split_once(':')
            .ok_or_else(|| Error::BadSpec(format!("bad --informative entry '{part}'")))?;
        let l: usize = l
            .trim()
            .parse()
            .map_err(|_| Error::BadSpec(format!("bad layer in '{part}'")))?;
        let h: usize = h
            .trim()
            .parse()
            .map_err(|_| Error::BadSpec(format!("bad head in '{part}'")))?;
        set.insert((l, h));
    }
    Ok(set)
}

fn parse_grid(spec: &str, what: &str) -> Result<Vec<f64>, Error> {
    let values: Result<Vec<f64>, _> = spec.split(',').map(|s| s.trim().parse()).collect();
    let values = values.map_err(|_| Error::BadSpec(format!("bad {what} grid '{spec}'")))?;
    if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::BadSpec(format!("{what} grid must be positive")));
    }
    Ok(values)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenSynthetic(args) => {
            let spec = SynthSpec::<Real> {
                n_samples: args.samples as usize,
                n_layers: args.layers as usize,
                n_heads: args.heads as usize,
                head_dim: args.dim as usize,
                class_balance: args.class_balance,
                separation: args.separation,
                informative_heads: parse_informative(
                    &args.informative,
                    args.layers as usize,
                    args.heads as usize,
                )?,
                noise_cov_scale: args.noise_cov_scale,
                seed: args.seed,
            };
            let ds = generate(&spec)?;
            save_dataset(&ds, &args.out)?;
            emit(json!({
                "written": args.out,
                "n_samples": ds.n_samples(),
                "n_layers": ds.n_layers(),
                "n_heads": ds.n_heads(),
                "head_dim": ds.head_dim(),
                "fingerprint": ds.fingerprint(),
            }));
        }
        Command::Fit(args) => {
            let train = load_dataset(&args.train)?;
            let val = load_dataset(&args.val)?;
            let cfg = args.flags.to_config(cli.seed);
            let bundle = fit_policy(&train, &val, &cfg)?;
            save_bundle(&bundle, &args.out)?;
            emit(json!({
                "bundle": args.out,
                "layer": bundle.layer,
                "tau": bundle.tau,
                "alpha": bundle.hyper.alpha,
                "gamma_factor": bundle.hyper.gamma_factor,
                "floor_used": bundle.hyper.floor_used,
                "heads": bundle.head_status.iter().enumerate().map(|(h, s)| {
                    json!({"head": h, "status": s})
                }).collect::<Vec<_>>(),
                "created_from": bundle.created_from,
            }));
        }
        Command::Apply(args) => {
            let bundle: PolicyBundle = load_bundle(&args.bundle)?;
            let ds = load_dataset(&args.input)?;
            let (edited, traces) = apply_policy(&bundle, &ds)?;
            save_dataset(&edited, &args.out)?;
            if let Some(trace_path) = &args.trace {
                let json = serde_json::to_vec(&traces)
                    .map_err(|e| Error::HeaderParse(e.to_string()))?;
                std::fs::write(trace_path, json)?;
            }
            let edited_samples = traces.iter().filter(|t| t.heads_edited > 0).count();
            let total_edits: usize = traces.iter().map(|t| t.heads_edited).sum();
            emit(json!({
                "written": args.out,
                "samples": ds.n_samples(),
                "edited_samples": edited_samples,
                "total_head_edits": total_edits,
            }));
        }
        Command::Eval(args) => {
            let bundle: PolicyBundle = load_bundle(&args.bundle)?;
            let ds = load_dataset(&args.input)?;
            let report = evaluate_pipeline(&bundle, &ds)?;
            let json = serde_json::to_value(&report)
                .map_err(|e| Error::HeaderParse(e.to_string()))?;
            std::fs::write(&args.report, serde_json::to_vec_pretty(&json).unwrap())?;
            emit(json);
        }
        Command::Grid(args) => {
            let train = load_dataset(&args.train)?;
            let val = load_dataset(&args.val)?;
            let alphas = parse_grid(&args.alphas, "alpha")?;
            let gammas = parse_grid(&args.gamma_factors, "gamma-factor")?;
            let cfg = args.flags.to_config(cli.seed);
            let outcome = grid_search(&train, &val, &alphas, &gammas, &cfg)?;
            let json = serde_json::to_value(&outcome)
                .map_err(|e| Error::HeaderParse(e.to_string()))?;
            std::fs::write(&args.report, serde_json::to_vec_pretty(&json).unwrap())?;
            emit(json!({
                "report": args.report,
                "selected_alpha": outcome.selected_alpha,
                "selected_gamma_factor": outcome.selected_gamma_factor,
                "all_excluded": outcome.all_excluded,
                "points": outcome.points.len(),
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut logger = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("RADIANT_LOG", "warn"),
    );
    if let Some(level) = &cli.log_level {
        logger.parse_filters(level);
    }
    let _ = logger.try_init();

    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers as usize)
            .build_global()
        {
            log::warn!("could not size worker pool: {e}");
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            emit(json!({
                "error": { "kind": err.kind(), "message": err.to_string() }
            }));
            ExitCode::FAILURE
        }
    }
}
