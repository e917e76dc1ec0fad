//! Command-line pipeline for driver identification experiments.
//!
//! Stages chain through documented artifacts: synth or ingest produce
//! trajectory CSVs, preprocess filters them, similarity scores per-driver
//! trajectory pairs, sample builds bias-controlled manifests, encode turns
//! trajectories into feature containers, train fits the classifier, and
//! eval / feature-grid / resolve / export-latents consume the trained model.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
//! failure.

mod config;
mod provenance;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use stages::StageContext;

#[derive(Parser)]
#[command(name = "driverid", version, about = "Driving-style learning and driver identification pipeline")]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory for this stage.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of synthetic drivers.
    #[arg(long)]
    drivers: Option<usize>,
    /// Trajectories per driver.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Style separation in [0, 1].
    #[arg(long)]
    separation: Option<f64>,
}

#[derive(Args)]
struct InputArgs {
    /// Trajectory CSV to consume.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Directory holding the similarity stage outputs.
    #[arg(long)]
    similarity_dir: Option<PathBuf>,
    /// Trajectory CSV (required for random sampling).
    #[arg(long)]
    input: Option<PathBuf>,
    /// threshold | stratified | random.
    #[arg(long)]
    strategy: Option<String>,
    /// Similarity threshold for threshold-based sampling.
    #[arg(long)]
    nu: Option<f64>,
    /// Bucket boundaries for stratified sampling.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Trajectories to keep per driver.
    #[arg(long)]
    n_trajectories: Option<usize>,
    /// Drivers to keep.
    #[arg(long)]
    n_drivers: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Trajectory CSV to encode.
    #[arg(long)]
    input: PathBuf,
    /// Restrict encoding to a manifest's trajectories.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Segment length in points.
    #[arg(long)]
    l1: Option<usize>,
    /// Frame length in columns.
    #[arg(long)]
    l2: Option<usize>,
    /// Comma-separated feature subset (e.g. speed,accel,rpm).
    #[arg(long)]
    features: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Encoded feature container.
    #[arg(long)]
    features_file: PathBuf,
    /// Dataset manifest to train on.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Evaluate the test split every N epochs.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Train the variant without batch normalization and residual.
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained checkpoint (model.json sidecar must sit next to it).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Encoded feature container.
    #[arg(long)]
    features_file: PathBuf,
    /// Manifest with split assignments (train writes split_manifest.json).
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct ResolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of driver subsets to sample.
    #[arg(long)]
    subsets: Option<usize>,
    /// Drivers per subset.
    #[arg(long)]
    drivers_per_subset: Option<usize>,
    /// Affinity propagation damping in [0.5, 1).
    #[arg(long)]
    damping: Option<f64>,
    /// Affinity propagation preference (default: median similarity).
    #[arg(long, allow_hyphen_values = true)]
    preference: Option<f64>,
}

#[derive(Args)]
struct FeatureGridArgs {
    /// Trajectory CSV to encode per subset.
    #[arg(long)]
    input: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Semicolon-separated subsets of comma-separated features,
    /// e.g. "speed,accel,rpm;rpm;head".
    #[arg(long)]
    subsets: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic telemetry.
    Synth(SynthArgs),
    /// Validate and normalize an external trajectory CSV.
    Ingest(InputArgs),
    /// Trim ends and filter by duration and missing values.
    Preprocess(InputArgs),
    /// Pairwise spatial similarity matrices per driver.
    Similarity(InputArgs),
    /// Build a bias-controlled dataset manifest.
    Sample(SampleArgs),
    /// Encode trajectories into aggregate feature maps.
    Encode(EncodeArgs),
    /// Train the classifier on encoded segments.
    Train(TrainArgs),
    /// Segment- and trajectory-level accuracy on the test split.
    Eval(ModelArgs),
    /// Train one model per feature subset and tabulate accuracy.
    FeatureGrid(FeatureGridArgs),
    /// Cluster trajectory latents to estimate the driver count.
    Resolve(ResolveArgs),
    /// Write per-trajectory latent vectors as CSV.
    ExportLatents(ModelArgs),
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(v) = a.drivers {
                cfg.synth.drivers = v;
            }
            if let Some(v) = a.trajectories {
                cfg.synth.trajectories = v;
            }
            if let Some(v) = a.separation {
                cfg.synth.separation = v;
            }
        }
        Command::Sample(a) => {
            if let Some(v) = &a.strategy {
                cfg.sample.strategy = v.clone();
            }
            if let Some(v) = a.nu {
                cfg.sample.nu = v;
            }
            if let Some(v) = &a.thresholds {
                cfg.sample.thresholds = v.clone();
            }
            if let Some(v) = a.n_trajectories {
                cfg.sample.n_trajectories = v;
            }
            if let Some(v) = a.n_drivers {
                cfg.sample.n_drivers = v;
            }
        }
        Command::Encode(a) => {
            if let Some(v) = a.l1 {
                cfg.encode.l1 = v;
            }
            if let Some(v) = a.l2 {
                cfg.encode.l2 = v;
            }
            if let Some(v) = &a.features {
                cfg.encode.features = v.split(',').map(|s| s.trim().to_string()).collect();
            }
        }
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = a.eval_every {
                cfg.train.eval_every = v;
            }
            if a.ablation {
                cfg.train.ablation = true;
            }
        }
        Command::FeatureGrid(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
        }
        Command::Resolve(a) => {
            if let Some(v) = a.subsets {
                cfg.resolve.subsets = v;
            }
            if let Some(v) = a.drivers_per_subset {
                cfg.resolve.drivers_per_subset = v;
            }
            if let Some(v) = a.damping {
                cfg.resolve.damping = v;
            }
            if a.preference.is_some() {
                cfg.resolve.preference = a.preference;
            }
        }
        _ => {}
    }
}

fn run(cli: &Cli) -> driverid_core::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut cfg, cli);
    if let Some(threads) = cfg.threads {
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| driverid_core::Error::validation(e.to_string()))?;
        }
    }
    let ctx = StageContext {
        out_dir: cli.out.clone(),
        seed: cfg.seed,
        config: cfg,
    };
    match &cli.command {
        Command::Synth(_) => stages::run_synth(&ctx),
        Command::Ingest(a) => stages::run_ingest(&ctx, &a.input),
        Command::Preprocess(a) => stages::run_preprocess(&ctx, &a.input),
        Command::Similarity(a) => stages::run_similarity(&ctx, &a.input),
        Command::Sample(a) => {
            stages::run_sample(&ctx, a.similarity_dir.as_deref(), a.input.as_deref())
        }
        Command::Encode(a) => stages::run_encode(&ctx, &a.input, a.manifest.as_deref()),
        Command::Train(a) => stages::run_train(&ctx, &a.features_file, &a.manifest),
        Command::Eval(a) => stages::run_eval(&ctx, &a.checkpoint, &a.features_file, &a.manifest),
        Command::FeatureGrid(a) => {
            stages::run_feature_grid(&ctx, &a.input, &a.manifest, &a.subsets)
        }
        Command::Resolve(a) => stages::run_resolve(
            &ctx,
            &a.model.checkpoint,
            &a.model.features_file,
            &a.model.manifest,
        ),
        Command::ExportLatents(a) => {
            stages::run_export_latents(&ctx, &a.checkpoint, &a.features_file, &a.manifest)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; help/version are not errors
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
