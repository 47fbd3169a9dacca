use anyhow::Result;
use clap::{Parser, Subcommand};
use mqlrec_cli::commands;
use mqlrec_cli::config::{PipelineConfig, Profile};
use mqlrec_core::corpus::Stage;
use mqlrec_core::ingest::Modality;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mqlrec",
    about = "Two-modality generative recommender pipeline",
    version
)]
struct Cli {
    /// Base profile: "paper" (paper-scale) or "desk" (laptop-scale).
    #[arg(long, global = true, default_value = "desk")]
    profile: String,

    /// TOML config file; values override the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the pipeline seed from profile/config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic embeddings and interaction histories.
    Synth,
    /// Train the residual quantizer for one modality.
    TrainTranslator {
        /// "text" or "image"
        #[arg(long)]
        modality: String,
    },
    /// Quantize all items, resolve collisions, write code table + vocab.
    Tokenize,
    /// Build train/valid/test example files for a stage.
    BuildCorpus {
        /// "pretrain" or "finetune"
        #[arg(long)]
        stage: String,
    },
    /// Train the seq2seq model for a stage.
    Train {
        /// "pretrain" or "finetune"
        #[arg(long)]
        stage: String,
        /// Checkpoint to initialize fine-tuning from (defaults to the
        /// pre-training checkpoint in the work dir).
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out test split.
    Evaluate {
        /// Checkpoint to evaluate (defaults to the fine-tune checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fuse the text and image ranked lists before scoring.
        #[arg(long)]
        rerank: bool,
    },
    /// Aggregate evaluate JSON reports into one comparison table.
    Report {
        /// report.json files from previous evaluate runs
        files: Vec<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "pretrain" => Ok(Stage::Pretrain),
        "finetune" => Ok(Stage::Finetune),
        other => anyhow::bail!("unknown stage {other:?}; expected \"pretrain\" or \"finetune\""),
    }
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "text" => Ok(Modality::Text),
        "image" => Ok(Modality::Image),
        other => anyhow::bail!("unknown modality {other:?}; expected \"text\" or \"image\""),
    }
}

fn run(cli: Cli) -> Result<()> {
    let profile = Profile::parse(&cli.profile)?;
    let mut cfg = PipelineConfig::load(profile, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::TrainTranslator { modality } => {
            commands::cmd_train_translator(&cfg, parse_modality(&modality)?)
        }
        Command::Tokenize => commands::cmd_tokenize(&cfg),
        Command::BuildCorpus { stage } => commands::cmd_build_corpus(&cfg, parse_stage(&stage)?),
        Command::Train { stage, init_from } => {
            commands::cmd_train(&cfg, parse_stage(&stage)?, init_from.as_deref())
        }
        Command::Evaluate { checkpoint, rerank } => {
            let tsv = commands::cmd_evaluate(&cfg, checkpoint.as_deref(), rerank)?;
            print!("{tsv}");
            Ok(())
        }
        Command::Report { files } => {
            let tsv = commands::cmd_report(&files)?;
            print!("{tsv}");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        // Machine-readable error on stderr; exit nonzero.
        let payload = serde_json::json!({
            "error": err.to_string(),
            "chain": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
