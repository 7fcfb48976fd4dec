//! Command-line entry point: runs the pipeline stages from a declarative
//! TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use denguenet::config::RunConfig;
use denguenet::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "denguenet", version, about = "Satellite-imagery dengue forecasting pipeline")]
struct Cli {
    /// Path to the run configuration (TOML).
    #[arg(long, global = true, default_value = "denguenet.toml")]
    config: PathBuf,

    /// Restrict per-region stages to one configured region.
    #[arg(long, global = true)]
    region: Option<String>,

    /// Overwrite artifacts produced under a different config hash.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch per-epi-week scenes into the scene store and validate cases.
    Extract,
    /// Compute the inter-band correlation matrix and select bands.
    Correlate,
    /// Remove clouds and cloud shadows by tile swapping.
    Clean {
        /// Also emit the cloud/shadow percentile sweep diagnostics.
        #[arg(long)]
        sweep: bool,
    },
    /// Extract texture vectors and frozen-encoder embeddings (with and
    /// without cloud removal).
    Featurize,
    /// Train every configured variant and seed; write model artifacts and
    /// prediction series.
    Train,
    /// Aggregate test metrics over the repeated seeds.
    Evaluate,
    /// Run the extractor-by-CSR ablation grid.
    Ablate,
    /// Emit per-region plot data across variants.
    Plotdata,
    /// Generate the deterministic synthetic fixture dataset.
    Synth,
    /// Run every stage in order.
    All,
}

fn run() -> anyhow::Result<()> {
    use anyhow::Context;

    let cli = Cli::parse();
    let (config, config_dir) = RunConfig::load(&cli.config)?;
    let pipeline = Pipeline::new(config, config_dir);
    let region = cli.region.as_deref();

    match cli.command {
        Command::Extract => pipeline.extract(region, cli.force).context("extract stage")?,
        Command::Correlate => {
            pipeline.correlate(cli.force).context("correlate stage")?;
        }
        Command::Clean { sweep } => {
            pipeline.clean(region, cli.force, sweep).context("clean stage")?
        }
        Command::Featurize => pipeline.featurize(region, cli.force).context("featurize stage")?,
        Command::Train => pipeline.train_stage(region, cli.force).context("train stage")?,
        Command::Evaluate => {
            pipeline.evaluate(cli.force).context("evaluate stage")?;
        }
        Command::Ablate => {
            pipeline.ablate(cli.force).context("ablate stage")?;
        }
        Command::Plotdata => pipeline.plotdata(region, cli.force).context("plotdata stage")?,
        Command::Synth => pipeline.synth().context("synth stage")?,
        Command::All => pipeline.run_all(cli.force).context("pipeline run")?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
