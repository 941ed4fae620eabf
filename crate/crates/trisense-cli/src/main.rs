//! Command-line front end: each subcommand drives one pipeline stage (or the
//! whole chain) from a single TOML configuration with flag overrides.
//!
//! Progress and diagnostics go to standard error; machine-readable artifacts
//! are written to files. Exit codes: 0 on success, 1 on usage errors, 2 on
//! data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use trisense::core::ModalityId;
use trisense::ingest::pointcloud::{load_point_cloud, save_xyz, PointCloudData};
use trisense::pipeline::{
    load_run_config, run_all, run_build_banks, run_evaluate, run_extract, run_fit_gates,
    run_score, ArtifactPaths, FusionMode, PipelineError, RunConfig,
};
use trisense::registration::{
    icp_align, load_transform, merge_scans, save_transform, RigidTransform, DEFAULT_DEDUP_RADIUS,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use trisense::synth::{generate_dataset, SynthConfig, SynthError};

/// Environment variable consulted for the default worker count when neither
/// the flag nor the configuration file sets one.
const WORKERS_ENV: &str = "TRISENSE_WORKERS";

#[derive(Parser)]
#[command(
    name = "trisense",
    version,
    about = "Multi-sensor anomaly detection: memory banks over RGB, infrared, and point-cloud features with decision-gated fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-sensor dataset.
    Synth(SynthArgs),
    /// Rigidly align one point cloud onto another and optionally merge them.
    Align(AlignArgs),
    /// Compute (or verify imported) per-sample feature matrices.
    Extract(PipelineArgs),
    /// Build per-category memory banks from training features.
    BuildBank(PipelineArgs),
    /// Score test samples against the banks and render localization maps.
    Score(PipelineArgs),
    /// Fit the per-category decision gating models.
    FitGate(PipelineArgs),
    /// Compute the evaluation report from scores and annotations.
    Evaluate(PipelineArgs),
    /// Run the full chain: extract, build-bank, score, fit-gate, evaluate.
    Run(PipelineArgs),
    /// Print a previously computed report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to write.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with the full generator configuration; defaults are used
    /// when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples per category (overrides the config file).
    #[arg(long)]
    train: Option<usize>,
    /// Normal test samples per category (overrides the config file).
    #[arg(long)]
    test_normal: Option<usize>,
    /// Defective test samples per category (overrides the config file).
    #[arg(long)]
    test_abnormal: Option<usize>,
}

#[derive(Args)]
struct AlignArgs {
    /// Cloud to move (XYZ or ASCII PLY).
    #[arg(long)]
    src: PathBuf,
    /// Reference cloud the source is aligned onto.
    #[arg(long)]
    dst: PathBuf,
    /// File the recovered rigid transform is written to.
    #[arg(long)]
    transform_out: PathBuf,
    /// Optional initial transform applied to the source before refinement.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Optional output for the merged (deduplicated) cloud.
    #[arg(long)]
    merged_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Convergence threshold on the RMSE improvement between iterations.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Merge drops transformed source points closer than this to the
    /// destination cloud.
    #[arg(long, default_value_t = DEFAULT_DEDUP_RADIUS)]
    dedup_radius: f64,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated modality subset (any of: rgb, ir, pc).
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<String>>,
    /// Fusion mode: gate, max, or mean.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Memory-bank coreset ratio in (0, 1].
    #[arg(long)]
    coreset_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gating one-class-SVM nu parameter.
    #[arg(long)]
    nu: Option<f64>,
    /// Gating RBF bandwidth (derived from the data when unset).
    #[arg(long)]
    gamma: Option<f64>,
    /// Patch grid edge for image features.
    #[arg(long)]
    grid: Option<u32>,
    /// Worker threads (0 = all available); TRISENSE_WORKERS supplies the
    /// default when neither this flag nor the config file sets one.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a previous evaluate run.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are successful outcomes; anything else is a
            // usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(if err.is_usage() { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Align(args) => cmd_align(args),
        Command::Extract(args) => {
            let config = resolve_config(&args)?;
            let n = run_extract(&config)?;
            eprintln!("extract: {n} feature matrices under {}", config.out.display());
            Ok(())
        }
        Command::BuildBank(args) => {
            let config = resolve_config(&args)?;
            let n = run_build_banks(&config)?;
            eprintln!("build-bank: {n} banks under {}", config.out.display());
            Ok(())
        }
        Command::Score(args) => {
            let config = resolve_config(&args)?;
            let n = run_score(&config)?;
            eprintln!("score: {n} sample scorings under {}", config.out.display());
            Ok(())
        }
        Command::FitGate(args) => {
            let config = resolve_config(&args)?;
            let n = run_fit_gates(&config)?;
            eprintln!("fit-gate: {n} gating models under {}", config.out.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let config = resolve_config(&args)?;
            let report = run_evaluate(&config)?;
            eprintln!("evaluate: report written under {}", config.out.display());
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Run(args) => {
            let config = resolve_config(&args)?;
            let report = run_all(&config)?;
            eprintln!("run: artifacts under {}", config.out.display());
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Report(args) => cmd_report(&args.out),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), PipelineError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(
                format!("{}: {e}", path.display()),
            ))?;
            toml::from_str::<SynthConfig>(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(train) = args.train {
        config.train_count = train;
    }
    if let Some(normal) = args.test_normal {
        config.test_normal = normal;
    }
    if let Some(abnormal) = args.test_abnormal {
        config.test_abnormal = abnormal;
    }
    // Invalid generator parameters are a usage problem, not bad data.
    config.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let manifest = generate_dataset(&config, &args.out).map_err(|e| match e {
        SynthError::Parameter(msg) => PipelineError::Config(msg),
        other => PipelineError::Synth(other),
    })?;
    eprintln!(
        "synth: {} samples across {} categories under {}",
        manifest.samples.len(),
        config.categories.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_align(args: AlignArgs) -> Result<(), PipelineError> {
    let src = load_point_cloud(&args.src)?;
    let dst = load_point_cloud(&args.dst)?;
    let init = match &args.init {
        Some(path) => load_transform(path)
            .map_err(|e| PipelineError::Data(format!("initial transform: {e}")))?,
        None => RigidTransform::identity(),
    };
    let result = icp_align(&src.points, &dst.points, &init, args.max_iter, args.tol);
    save_transform(&result.transform, &args.transform_out)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    eprintln!(
        "align: rmse {:.6e} after {} iterations (converged: {})",
        result.rmse, result.iterations, result.converged
    );
    if let Some(merged_out) = &args.merged_out {
        let merged = merge_scans(&dst.points, &src.points, &result.transform, args.dedup_radius);
        let cloud = PointCloudData::new(merged)
            .map_err(|e| PipelineError::Data(format!("merged cloud: {e}")))?;
        save_xyz(&cloud, merged_out)?;
        eprintln!("align: merged cloud ({} points) at {}", cloud.len(), merged_out.display());
    }
    Ok(())
}

fn cmd_report(out: &Path) -> Result<(), PipelineError> {
    let path = ArtifactPaths::new(out).report("json");
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            hint: "no report found; run the evaluate stage first".into(),
        });
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let report: trisense::metrics::EvalReport = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("{}: invalid report: {e}", path.display())))?;
    print!("{}", report.to_text());
    Ok(())
}

fn resolve_config(args: &PipelineArgs) -> Result<RunConfig, PipelineError> {
    let mut config = match &args.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(dataset) = &args.dataset {
        config.dataset = dataset.clone();
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    if let Some(tags) = &args.modalities {
        config.modalities = parse_modalities(tags)?;
    }
    if let Some(fusion) = args.fusion {
        config.fusion = fusion;
    }
    if let Some(ratio) = args.coreset_ratio {
        config.coreset_ratio = ratio;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(nu) = args.nu {
        config.nu = nu;
    }
    if let Some(gamma) = args.gamma {
        config.gamma = Some(gamma);
    }
    if let Some(grid) = args.grid {
        config.grid = grid;
    }
    match (args.workers, config.workers) {
        (Some(w), _) => config.workers = w,
        (None, 0) => {
            if let Ok(value) = std::env::var(WORKERS_ENV) {
                config.workers = value.parse().map_err(|_| {
                    PipelineError::Config(format!(
                        "{WORKERS_ENV}={value:?} is not a valid worker count"
                    ))
                })?;
            }
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn parse_modalities(tags: &[String]) -> Result<Vec<ModalityId>, PipelineError> {
    let mut subset = Vec::new();
    for tag in tags {
        let m = ModalityId::parse_tag(tag).ok_or_else(|| {
            PipelineError::Config(format!("unknown modality {tag:?} (expected rgb, ir, or pc)"))
        })?;
        if subset.contains(&m) {
            return Err(PipelineError::Config(format!("modality {tag:?} listed twice")));
        }
        subset.push(m);
    }
    subset.sort();
    Ok(subset)
}
