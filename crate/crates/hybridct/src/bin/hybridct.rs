//! Pipeline CLI: each subcommand runs one stage (resuming whatever upstream
//! work is already current); `run-all` drives the whole chain.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hybridct::features::BackboneId;
use hybridct::pipeline::{init_threads_from_env, Pipeline, RunConfig};
use hybridct::report::comparison_table;

#[derive(Parser)]
#[command(name = "hybridct", version, about = "Hybrid CT-scan classifier pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration; missing keys take the reference defaults.
    #[arg(long)]
    config: PathBuf,
    /// Override the run directory from the config.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite artifacts left by a different configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Scan the dataset and write the split manifest.
    Prepare(StageArgs),
    /// Fine-tune one backbone (all three when --backbone is omitted).
    Train {
        #[command(flatten)]
        stage: StageArgs,
        /// vgg16 | densenet121 | mobilenetv2
        #[arg(long)]
        backbone: Option<BackboneId>,
    },
    /// Extract penultimate features for the TRAIN and TEST splits.
    Extract(StageArgs),
    /// Fit the scaler+PCA fusion and write stacked features.
    Fuse(StageArgs),
    /// Train the support-vector classifier on stacked TRAIN features.
    FitSvc(StageArgs),
    /// Evaluate all models on TEST and render reports.
    Evaluate(StageArgs),
    /// Run every stage in dependency order.
    RunAll(StageArgs),
    /// Generate the bundled synthetic smoke dataset.
    SynthData {
        /// Output directory (gets COVID/ and non-COVID/ subdirectories).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn open_pipeline(stage: &StageArgs) -> hybridct::Result<Pipeline> {
    let mut config = RunConfig::load(&stage.config)?;
    if let Some(dir) = &stage.run_dir {
        config.run_dir = dir.clone();
    }
    if let Some(seed) = stage.seed {
        config.seed = seed;
    }
    Pipeline::open(config)
}

fn run(cli: Cli) -> hybridct::Result<()> {
    match cli.command {
        Command::Prepare(stage) => {
            let mut pipeline = open_pipeline(&stage)?;
            let dataset = pipeline.stage_prepare(stage.force)?;
            let counts = dataset.counts();
            println!("prepared {} records:", dataset.records.len());
            for ((label, split), count) in counts {
                println!("  {label:<9} {split:<6} {count}");
            }
        }
        Command::Train { stage, backbone } => {
            let mut pipeline = open_pipeline(&stage)?;
            let ids = backbone.map_or_else(|| BackboneId::ALL.to_vec(), |id| vec![id]);
            for id in ids {
                pipeline.stage_train(id, stage.force)?;
                println!("trained {id}");
            }
        }
        Command::Extract(stage) => {
            open_pipeline(&stage)?.stage_extract(stage.force)?;
            println!("features extracted");
        }
        Command::Fuse(stage) => {
            open_pipeline(&stage)?.stage_fuse(stage.force)?;
            println!("fusion fitted and stacked features written");
        }
        Command::FitSvc(stage) => {
            open_pipeline(&stage)?.stage_fit_svc(stage.force)?;
            println!("svc fitted");
        }
        Command::Evaluate(stage) => {
            let reports = open_pipeline(&stage)?.stage_evaluate(stage.force)?;
            print!("{}", comparison_table(&reports));
        }
        Command::RunAll(stage) => {
            let reports = open_pipeline(&stage)?.run_all(stage.force)?;
            print!("{}", comparison_table(&reports));
        }
        Command::SynthData { out, per_class, seed } => {
            hybridct::synth::generate_synthetic_dataset(&out, per_class, seed)?;
            println!("wrote {per_class} images per class under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    init_threads_from_env();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}
