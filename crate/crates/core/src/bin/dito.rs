//! Config-driven experiment runner for detection-oriented pretraining and
//! shifted-window learning on the synthetic benchmark.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dito_core::config::ExperimentConfig;
use dito_core::runner;

#[derive(Parser)]
#[command(name = "dito", version, about = "Detection-oriented image-text pretraining, desk scale")]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in desk-scale config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. --set swl.q=0.25 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Force single-threaded deterministic evaluation.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override run.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pretraining/finetune/eval splits.
    GenData,
    /// Phase 1: contrastive pretraining of the dual encoders.
    PretrainClip,
    /// Phase 2: detection-oriented pretraining of the detector heads.
    PretrainDop,
    /// Open-vocabulary detection finetuning on base categories.
    Finetune,
    /// Evaluate the detector: AP, retrieval, pointing game.
    Evaluate,
    /// Render similarity-heatmap PNG pairs.
    Heatmap,
    /// Run the 2x2 {DOP} x {SWL} ablation grid.
    Ablate {
        /// Seeds to run (repeatable).
        #[arg(long, default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
}

fn load_config(cli: &Cli) -> dito_core::Result<ExperimentConfig> {
    let overrides: Vec<(String, String)> = cli
        .sets
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| dito_core::Error::Config(format!("--set needs KEY=VALUE, got '{s}'")))
        })
        .collect::<dito_core::Result<_>>()?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml_with_overrides(
            &ExperimentConfig::desk_default().to_toml(),
            &overrides,
        )?,
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    if cli.deterministic {
        cfg.run.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_thread_pool(cfg: &ExperimentConfig) {
    let threads = std::env::var("DITO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    let threads = if cfg.run.deterministic { Some(1) } else { threads };
    if let Some(n) = threads {
        // Pool may already exist when called from tests; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> dito_core::Result<()> {
    let cfg = load_config(&cli)?;
    init_thread_pool(&cfg);
    match cli.command {
        Command::GenData => runner::run_gen_data(&cfg),
        Command::PretrainClip => runner::run_pretrain_clip(&cfg).map(|_| ()),
        Command::PretrainDop => runner::run_pretrain_dop(&cfg).map(|_| ()),
        Command::Finetune => runner::run_finetune(&cfg).map(|_| ()),
        Command::Evaluate => runner::run_evaluate(&cfg).map(|_| ()),
        Command::Heatmap => runner::run_heatmap(&cfg),
        Command::Ablate { seeds } => runner::run_ablate(&cfg, &seeds).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
