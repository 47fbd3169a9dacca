//! Pipeline configuration: profile defaults (paper-scale or desk-scale)
//! overlaid with values from a TOML config file.

use anyhow::{bail, Context, Result};
use mqlrec_core::corpus::Stage;
use mqlrec_core::ingest::SynthConfig;
use mqlrec_core::optim::LrSchedule;
use mqlrec_core::rqvae::RqVaeConfig;
use mqlrec_core::seq2seq::{ModelConfig, TrainSchedule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => bail!("unknown profile {other:?}; expected \"paper\" or \"desk\""),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub work_dir: PathBuf,
    pub text_embeddings: PathBuf,
    pub image_embeddings: PathBuf,
    pub interactions: PathBuf,
}

/// Model shape; vocab size and seed are filled in at train time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSettings {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub model_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub tied_output: bool,
}

impl ModelSettings {
    pub fn to_model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim,
            model_dim: self.model_dim,
            vocab_size,
            max_positions: self.max_positions,
            dropout: self.dropout,
            tied_output: self.tied_output,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant learning rate (default 1e-3).
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak of the warm-up + cosine schedule (default 5e-4).
    pub max_lr: f64,
    /// Fraction of total steps spent warming up.
    pub warmup_frac: f64,
    /// Refuse to fine-tune without a pre-training checkpoint.
    pub require_pretrain: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub beam_size: usize,
    pub ks: Vec<usize>,
    pub rerank: bool,
}

/// Fine-tune task toggles mirroring the ablation rows; NIG is always on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskToggles {
    pub aig: bool,
    pub qla: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub rqvae: RqVaeConfig,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    pub eval: EvalSettings,
    pub tasks: TaskToggles,
}

impl PipelineConfig {
    pub fn profile_default(profile: Profile) -> PipelineConfig {
        let work_dir = PathBuf::from("work");
        let paths = Paths {
            text_embeddings: work_dir.join("text.emb"),
            image_embeddings: work_dir.join("image.emb"),
            interactions: work_dir.join("interactions.tsv"),
            work_dir,
        };
        match profile {
            Profile::Paper => PipelineConfig {
                seed: 0,
                paths,
                synth: SynthConfig::default(),
                rqvae: RqVaeConfig::default(),
                model: ModelSettings {
                    enc_layers: 4,
                    dec_layers: 4,
                    heads: 6,
                    head_dim: 64,
                    ffn_dim: 1024,
                    model_dim: 128,
                    max_positions: 128,
                    dropout: 0.1,
                    tied_output: false,
                },
                pretrain: PretrainSettings {
                    epochs: 10,
                    batch_size: 4096,
                    lr: 1e-3,
                },
                finetune: FinetuneSettings {
                    epochs: 10,
                    batch_size: 512,
                    max_lr: 5e-4,
                    warmup_frac: 0.1,
                    require_pretrain: true,
                },
                eval: EvalSettings {
                    beam_size: 20,
                    ks: vec![1, 5, 10],
                    rerank: false,
                },
                tasks: TaskToggles { aig: true, qla: true },
            },
            Profile::Desk => PipelineConfig {
                seed: 0,
                paths,
                synth: SynthConfig::default(),
                rqvae: RqVaeConfig {
                    codebook_size: 32,
                    code_dim: 16,
                    encoder_hidden: vec![64, 32],
                    decoder_hidden: vec![32, 64],
                    batch_size: 256,
                    epochs: 15,
                    ..RqVaeConfig::default()
                },
                model: ModelSettings {
                    enc_layers: 2,
                    dec_layers: 2,
                    heads: 4,
                    head_dim: 16,
                    ffn_dim: 128,
                    model_dim: 64,
                    max_positions: 96,
                    dropout: 0.1,
                    tied_output: false,
                },
                pretrain: PretrainSettings {
                    epochs: 3,
                    batch_size: 64,
                    lr: 1e-3,
                },
                finetune: FinetuneSettings {
                    epochs: 3,
                    batch_size: 64,
                    max_lr: 5e-4,
                    warmup_frac: 0.1,
                    require_pretrain: true,
                },
                eval: EvalSettings {
                    beam_size: 20,
                    ks: vec![1, 5, 10],
                    rerank: false,
                },
                tasks: TaskToggles { aig: true, qla: true },
            },
        }
    }

    /// Profile defaults with the config file's values merged over them;
    /// every field in the file is optional.
    pub fn load(profile: Profile, config_path: Option<&Path>) -> Result<PipelineConfig> {
        let base = Self::profile_default(profile);
        let Some(path) = config_path else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let overrides: toml::Value = text
            .parse()
            .with_context(|| format!("parsing config {}", path.display()))?;
        let mut merged = toml::Value::try_from(&base).context("serializing defaults")?;
        merge_toml(&mut merged, &overrides);
        merged
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn pretrain_schedule(&self, total_steps: u64) -> TrainSchedule {
        let _ = total_steps;
        TrainSchedule {
            stage: Stage::Pretrain,
            batch_size: self.pretrain.batch_size,
            epochs: self.pretrain.epochs,
            lr: LrSchedule::Constant {
                lr: self.pretrain.lr,
            },
            weight_decay: 0.01,
            seed: self.seed,
            checkpoint_every: None,
        }
    }

    pub fn finetune_schedule(&self, total_steps: u64) -> TrainSchedule {
        TrainSchedule {
            stage: Stage::Finetune,
            batch_size: self.finetune.batch_size,
            epochs: self.finetune.epochs,
            lr: LrSchedule::WarmupCosine {
                max_lr: self.finetune.max_lr,
                warmup_steps: ((total_steps as f64 * self.finetune.warmup_frac) as u64).max(1),
                total_steps,
            },
            weight_decay: 0.01,
            seed: self.seed,
            checkpoint_every: None,
        }
    }

    // Artifact locations inside the work dir.
    pub fn translator_ckpt(&self, modality: mqlrec_core::ingest::Modality) -> PathBuf {
        self.paths
            .work_dir
            .join(format!("translator_{}.ckpt", modality.as_str()))
    }

    pub fn code_table_path(&self) -> PathBuf {
        self.paths.work_dir.join("code_table.tsv")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths.work_dir.join("vocab.txt")
    }

    pub fn corpus_path(&self, stage: Stage, split: &str) -> PathBuf {
        self.paths
            .work_dir
            .join(format!("corpus_{}_{split}.tsv", stage.name()))
    }

    pub fn model_ckpt(&self, stage: Stage) -> PathBuf {
        self.paths
            .work_dir
            .join(format!("model_{}.ckpt", stage.name()))
    }

    pub fn train_log_path(&self, stage: Stage) -> PathBuf {
        self.paths
            .work_dir
            .join(format!("train_log_{}.csv", stage.name()))
    }

    pub fn report_path(&self, ext: &str) -> PathBuf {
        self.paths.work_dir.join(format!("report.{ext}"))
    }
}

/// Recursively overlay `over` onto `base`; tables merge key-wise, every
/// other value replaces.
fn merge_toml(base: &mut toml::Value, over: &toml::Value) {
    match (base, over) {
        (toml::Value::Table(base), toml::Value::Table(over)) => {
            for (k, v) in over {
                match base.get_mut(k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        base.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}
