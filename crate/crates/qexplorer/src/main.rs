use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qexplorer::config::{PipelineConfig, ENV_OUT_DIR, ENV_PORT};
use qexplorer::pipeline::{Pipeline, Stage};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "qexplorer", version, about = "Query extraction trained from search feedback")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, env = ENV_OUT_DIR)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the evaluation and history corpora and their reports.
    GenCorpus(SeedArg),
    /// Fit the ranking model and build both indexes.
    BuildIndex(SeedArg),
    /// Build the SFT and preference datasets from history feedback.
    MakeDatasets(SeedArg),
    /// Pretrain the base language model.
    PretrainBase(SeedArg),
    /// Train the SFT adapter.
    TrainSft(SeedArg),
    /// Train the DPO adapter on top of the SFT model.
    TrainDpo {
        #[command(flatten)]
        seed: SeedArg,
        /// Train on the ablation preference set instead.
        #[arg(long)]
        ablation: bool,
    },
    /// Extract queries for every method against the evaluation snapshot.
    Extract(SeedArg),
    /// Score the extracted queries and print the comparison table.
    Evaluate(SeedArg),
    /// Run every stage for every configured seed and summarise.
    RunPipeline {
        /// Comma-separated seeds overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Serve the auditor API over the evaluation corpus of a seed.
    Serve {
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, env = ENV_PORT, default_value_t = 8080)]
        port: u16,
        /// Suggest human annotations only, without loading a model.
        #[arg(long)]
        no_model: bool,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let mut c = PipelineConfig::default();
            c.apply_env();
            c
        }
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(cfg: PipelineConfig, seed: u64, stage: Stage) -> anyhow::Result<()> {
    let pipeline = Pipeline::new(cfg)?;
    let m = pipeline.ensure(seed, stage)?;
    let dir = pipeline.seed_dir(seed);
    for (name, hash) in &m.outputs {
        println!("{}  {}", hash, dir.join(name).display());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenCorpus(s) => run_stage(cfg, s.seed, Stage::Corpus),
        Command::BuildIndex(s) => run_stage(cfg, s.seed, Stage::Index),
        Command::MakeDatasets(s) => run_stage(cfg, s.seed, Stage::Datasets),
        Command::PretrainBase(s) => run_stage(cfg, s.seed, Stage::Base),
        Command::TrainSft(s) => run_stage(cfg, s.seed, Stage::Sft),
        Command::TrainDpo { seed, ablation } => {
            let stage = if ablation { Stage::DpoAblation } else { Stage::Dpo };
            run_stage(cfg, seed.seed, stage)
        }
        Command::Extract(s) => run_stage(cfg, s.seed, Stage::Extract),
        Command::Evaluate(s) => {
            let pipeline = Pipeline::new(cfg)?;
            let report = pipeline.run_seed(s.seed)?;
            print!("{}", report.comparison.to_text());
            Ok(())
        }
        Command::RunPipeline { seeds } => {
            let mut cfg = cfg;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            let pipeline = Pipeline::new(cfg)?;
            let summary = pipeline.run_all()?;
            print!("{}", summary.to_text());
            Ok(())
        }
        Command::Serve { seed, port, no_model } => {
            let pipeline = Pipeline::new(cfg)?;
            let service = qexplorer::service::Service::from_pipeline(&pipeline, seed.seed, !no_model)
                .context("preparing the service")?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(qexplorer::service::serve(service, port))
        }
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}
