//! Pipeline subcommands. Each command reads artifacts produced by the
//! previous stage (verified against that stage's manifest), writes its
//! own artifacts, and records a manifest with config/input/output hashes.

use crate::config::PipelineConfig;
use crate::manifest::{sha256_bytes, verify_produced_by, Manifest};
use anyhow::{bail, Context, Result};
use mqlrec_core::checkpoint::Checkpoint;
use mqlrec_core::corpus::{
    assemble_stage, build_aig, build_nig, build_qla, format_examples, parse_examples,
    split_leave_one_out, train_history_items, SplitDataset, Stage, TaskExample, TaskKind,
};
use mqlrec_core::evaluate::{
    evaluate_run, format_report_json, format_report_tsv, EvalOptions, ModelRanker,
};
use mqlrec_core::generate::CodeTrie;
use mqlrec_core::ingest::{
    generate_synthetic, load_embeddings, load_interactions, write_embeddings,
    write_interactions, InteractionLoadOptions, Modality,
};
use mqlrec_core::quantlang::{
    build_vocabulary, format_code_table, format_vocabulary, merge_modalities, parse_code_table,
    parse_vocabulary, resolve_collisions, ItemCodeTable, Vocabulary,
};
use mqlrec_core::rqvae::{train_translator, QuantTranslator, RqVaeConfig};
use mqlrec_core::seq2seq::{format_train_log, train, Seq2SeqModel};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn config_hash(cfg: &PipelineConfig) -> String {
    sha256_bytes(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

fn ensure_work_dir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.work_dir)
        .with_context(|| format!("creating work dir {}", cfg.paths.work_dir.display()))?;
    Ok(())
}

/// Generate the synthetic two-modality dataset and write it to the
/// configured embedding/interaction paths.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<()> {
    ensure_work_dir(cfg)?;
    let mut synth = cfg.synth.clone();
    synth.seed = cfg.seed;
    let data = generate_synthetic(&synth)?;
    if let Some(dir) = cfg.paths.text_embeddings.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_embeddings(&cfg.paths.text_embeddings, &data.text)?;
    write_embeddings(&cfg.paths.image_embeddings, &data.image)?;
    write_interactions(&cfg.paths.interactions, &data.interactions)?;

    let mut manifest = Manifest::new("synth", cfg.seed, config_hash(cfg));
    manifest.record_output(&cfg.paths.text_embeddings)?;
    manifest.record_output(&cfg.paths.image_embeddings)?;
    manifest.record_output(&cfg.paths.interactions)?;
    manifest.info = serde_json::json!({
        "n_items": synth.n_items,
        "n_users": data.interactions.n_users(),
    });
    manifest.save(&cfg.paths.work_dir)
}

fn embeddings_path(cfg: &PipelineConfig, modality: Modality) -> PathBuf {
    match modality {
        Modality::Text => cfg.paths.text_embeddings.clone(),
        Modality::Image => cfg.paths.image_embeddings.clone(),
    }
}

/// Train the RQ-VAE translator for one modality and checkpoint it.
pub fn cmd_train_translator(cfg: &PipelineConfig, modality: Modality) -> Result<()> {
    ensure_work_dir(cfg)?;
    let emb_path = embeddings_path(cfg, modality);
    let embeddings = load_embeddings(&emb_path, modality)?;
    let rq = RqVaeConfig {
        // distinct streams per modality
        seed: cfg.seed.wrapping_mul(2).wrapping_add(match modality {
            Modality::Text => 1,
            Modality::Image => 2,
        }),
        ..cfg.rqvae.clone()
    };
    let translator = train_translator(&embeddings, &rq)?;

    let ckpt_path = cfg.translator_ckpt(modality);
    translator.to_checkpoint().save(&ckpt_path)?;
    let log_path = cfg
        .paths
        .work_dir
        .join(format!("translator_{}_log.csv", modality.as_str()));
    let mut log = String::from("epoch,recon,rq,total\n");
    for e in &translator.train_log {
        log.push_str(&format!("{},{},{},{}\n", e.epoch, e.recon, e.rq, e.total));
    }
    std::fs::write(&log_path, log)?;

    let mut manifest = Manifest::new(
        &format!("train-translator-{}", modality.as_str()),
        cfg.seed,
        config_hash(cfg),
    );
    manifest.record_input(&emb_path)?;
    manifest.record_output(&ckpt_path)?;
    manifest.record_output(&log_path)?;
    manifest.info = serde_json::json!({
        "final_loss": translator.train_log.last().map(|e| e.total),
        "epochs": translator.train_log.len(),
    });
    manifest.save(&cfg.paths.work_dir)
}

fn load_translator(cfg: &PipelineConfig, modality: Modality) -> Result<QuantTranslator> {
    let path = cfg.translator_ckpt(modality);
    if !path.exists() {
        bail!(
            "translator checkpoint {} not found; run `mqlrec train-translator --modality {}` first",
            path.display(),
            modality.as_str()
        );
    }
    Ok(QuantTranslator::from_checkpoint(&Checkpoint::load(&path)?)?)
}

/// Quantize every item in both modalities, resolve collisions, and write
/// the code table plus the token vocabulary.
pub fn cmd_tokenize(cfg: &PipelineConfig) -> Result<()> {
    ensure_work_dir(cfg)?;
    let levels = cfg.rqvae.levels;
    let k = cfg.rqvae.codebook_size;
    let vocab = build_vocabulary(levels, k, TaskKind::ALL.len())?;

    let mut tables = Vec::new();
    let mut collision_info = serde_json::Map::new();
    let mut manifest = Manifest::new("tokenize", cfg.seed, config_hash(cfg));
    for modality in [Modality::Text, Modality::Image] {
        let emb_path = embeddings_path(cfg, modality);
        let embeddings = load_embeddings(&emb_path, modality)?;
        let translator = load_translator(cfg, modality)?;
        verify_produced_by(
            &cfg.paths.work_dir,
            &format!("train-translator-{}", modality.as_str()),
            &cfg.translator_ckpt(modality),
        )?;
        let (results, stats) = translator.quantize_all(&embeddings)?;
        let table = resolve_collisions(&results, k, levels, modality)?;
        collision_info.insert(
            modality.as_str().to_string(),
            serde_json::json!({
                "colliding_tuples": stats.colliding_tuples,
                "colliding_items": stats.colliding_items,
                "reassigned": table
                    .provenance
                    .values()
                    .filter(|p| !matches!(p, mqlrec_core::quantlang::Provenance::Original))
                    .count(),
            }),
        );
        manifest.record_input(&emb_path)?;
        manifest.record_input(&cfg.translator_ckpt(modality))?;
        tables.push(table);
    }
    let image = tables.pop().expect("two tables");
    let text = tables.pop().expect("two tables");
    let table = merge_modalities(text, image)?;

    std::fs::write(cfg.code_table_path(), format_code_table(&table, &vocab))?;
    std::fs::write(cfg.vocab_path(), format_vocabulary(&vocab))?;
    manifest.record_output(&cfg.code_table_path())?;
    manifest.record_output(&cfg.vocab_path())?;
    manifest.info = serde_json::json!({
        "vocab_size": vocab.size(),
        "items": table.text.len(),
        "collisions": collision_info,
    });
    manifest.save(&cfg.paths.work_dir)
}

fn load_table_and_vocab(cfg: &PipelineConfig) -> Result<(ItemCodeTable, Vocabulary)> {
    for path in [cfg.code_table_path(), cfg.vocab_path()] {
        if !path.exists() {
            bail!("{} not found; run `mqlrec tokenize` first", path.display());
        }
        verify_produced_by(&cfg.paths.work_dir, "tokenize", &path)?;
    }
    let vocab = parse_vocabulary(&std::fs::read_to_string(cfg.vocab_path())?)?;
    let table = parse_code_table(&std::fs::read_to_string(cfg.code_table_path())?, &vocab)?;
    Ok((table, vocab))
}

/// Build the train/valid/test example files for one stage, honoring the
/// fine-tune task toggles.
pub fn cmd_build_corpus(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    ensure_work_dir(cfg)?;
    let (table, vocab) = load_table_and_vocab(cfg)?;
    let loaded = load_interactions(&cfg.paths.interactions, InteractionLoadOptions::default())?;
    let split = split_leave_one_out(&loaded.dataset);

    let mut parts = vec![
        build_nig(&split, &table, &vocab, Modality::Text)?,
        build_nig(&split, &table, &vocab, Modality::Image)?,
    ];
    if stage == Stage::Finetune {
        if cfg.tasks.aig {
            parts.push(build_aig(&split, &table, &vocab, Modality::Text)?);
            parts.push(build_aig(&split, &table, &vocab, Modality::Image)?);
        }
        if cfg.tasks.qla {
            let items = train_history_items(&split);
            parts.push(build_qla(&items, &table, &vocab, TaskKind::QlaTextToImage)?);
            parts.push(build_qla(&items, &table, &vocab, TaskKind::QlaImageToText)?);
        }
    }
    let dataset = assemble_stage(stage, parts, cfg.seed)?;

    let mut manifest = Manifest::new(
        &format!("build-corpus-{}", stage.name()),
        cfg.seed,
        config_hash(cfg),
    );
    manifest.record_input(&cfg.paths.interactions)?;
    manifest.record_input(&cfg.code_table_path())?;
    manifest.record_input(&cfg.vocab_path())?;
    for (split_name, examples) in [
        ("train", &dataset.train),
        ("valid", &dataset.valid),
        ("test", &dataset.test),
    ] {
        let path = cfg.corpus_path(stage, split_name);
        std::fs::write(&path, format_examples(examples))?;
        manifest.record_output(&path)?;
    }
    manifest.info = serde_json::json!({
        "task_mix": dataset.task_mix,
        "dropped_users": loaded.dropped_users.len(),
        "excluded_short_users": split.excluded.len(),
        "users": split.users.len(),
    });
    manifest.save(&cfg.paths.work_dir)
}

fn load_corpus_split(cfg: &PipelineConfig, stage: Stage, split: &str) -> Result<Vec<TaskExample>> {
    let path = cfg.corpus_path(stage, split);
    if !path.exists() {
        bail!(
            "{} not found; run `mqlrec build-corpus --stage {}` first",
            path.display(),
            stage.name()
        );
    }
    verify_produced_by(
        &cfg.paths.work_dir,
        &format!("build-corpus-{}", stage.name()),
        &path,
    )?;
    Ok(parse_examples(&std::fs::read_to_string(&path)?)?)
}

fn dataset_from_examples(stage: Stage, examples: Vec<TaskExample>) -> SplitDataset {
    let mut task_mix: BTreeMap<&'static str, usize> = BTreeMap::new();
    for e in &examples {
        *task_mix.entry(e.task.name()).or_insert(0) += 1;
    }
    SplitDataset {
        stage,
        train: examples,
        valid: Vec::new(),
        test: Vec::new(),
        task_mix,
    }
}

/// Train the seq2seq model for one stage. Fine-tuning initializes from
/// the pre-training checkpoint unless the config opts out.
pub fn cmd_train(cfg: &PipelineConfig, stage: Stage, init_from: Option<&Path>) -> Result<()> {
    ensure_work_dir(cfg)?;
    let vocab = parse_vocabulary(&std::fs::read_to_string(cfg.vocab_path())?)?;
    let examples = load_corpus_split(cfg, stage, "train")?;
    let dataset = dataset_from_examples(stage, examples);

    let mut model = match stage {
        Stage::Pretrain => {
            Seq2SeqModel::init(cfg.model.to_model_config(vocab.size(), cfg.seed))?
        }
        Stage::Finetune => {
            let default_path = cfg.model_ckpt(Stage::Pretrain);
            let path = init_from.unwrap_or(&default_path);
            if path.exists() {
                let model = Seq2SeqModel::from_checkpoint(&Checkpoint::load(path)?)?;
                if model.config.vocab_size != vocab.size() {
                    bail!(
                        "checkpoint {} was trained with vocab size {}, current vocabulary has {}",
                        path.display(),
                        model.config.vocab_size,
                        vocab.size()
                    );
                }
                model
            } else if cfg.finetune.require_pretrain {
                bail!(
                    "fine-tuning requires a pre-training checkpoint but {} does not exist; \
                     run `mqlrec train --stage pretrain` first, pass --init-from, or set \
                     finetune.require_pretrain = false",
                    path.display()
                );
            } else {
                Seq2SeqModel::init(cfg.model.to_model_config(vocab.size(), cfg.seed))?
            }
        }
    };

    let steps_per_epoch = dataset.train.len().div_ceil(match stage {
        Stage::Pretrain => cfg.pretrain.batch_size,
        Stage::Finetune => cfg.finetune.batch_size,
    }) as u64;
    let schedule = match stage {
        Stage::Pretrain => cfg.pretrain_schedule(steps_per_epoch * cfg.pretrain.epochs as u64),
        Stage::Finetune => cfg.finetune_schedule(steps_per_epoch * cfg.finetune.epochs as u64),
    };
    let records = train(&mut model, &dataset, &schedule, Some(&cfg.paths.work_dir))?;

    let ckpt_path = cfg.model_ckpt(stage);
    model
        .to_checkpoint(
            Some(stage.name()),
            serde_json::json!({ "steps": records.len() }),
        )
        .save(&ckpt_path)?;
    let log_path = cfg.train_log_path(stage);
    std::fs::write(&log_path, format_train_log(&records))?;

    let mut manifest = Manifest::new(
        &format!("train-{}", stage.name()),
        cfg.seed,
        config_hash(cfg),
    );
    manifest.record_input(&cfg.corpus_path(stage, "train"))?;
    manifest.record_input(&cfg.vocab_path())?;
    if stage == Stage::Finetune {
        let default_path = cfg.model_ckpt(Stage::Pretrain);
        let path = init_from.unwrap_or(&default_path);
        if path.exists() {
            manifest.record_input(path)?;
        }
    }
    manifest.record_output(&ckpt_path)?;
    manifest.record_output(&log_path)?;
    manifest.info = serde_json::json!({
        "steps": records.len(),
        "final_loss": records.last().map(|r| r.loss),
        "task_mix": dataset.task_mix,
    });
    manifest.save(&cfg.paths.work_dir)
}

/// Evaluate a checkpoint on the fine-tune test split; writes the metrics
/// report as TSV and JSON and returns the TSV for display.
pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    rerank_flag: bool,
) -> Result<String> {
    ensure_work_dir(cfg)?;
    let (table, vocab) = load_table_and_vocab(cfg)?;
    let default_ckpt = cfg.model_ckpt(Stage::Finetune);
    let ckpt_path = checkpoint.unwrap_or(&default_ckpt);
    if !ckpt_path.exists() {
        bail!(
            "model checkpoint {} not found; run `mqlrec train --stage finetune` first",
            ckpt_path.display()
        );
    }
    let model = Seq2SeqModel::from_checkpoint(&Checkpoint::load(ckpt_path)?)?;
    if model.config.vocab_size != vocab.size() {
        bail!(
            "checkpoint {} was trained with vocab size {}, current vocabulary has {}",
            ckpt_path.display(),
            model.config.vocab_size,
            vocab.size()
        );
    }

    let test = load_corpus_split(cfg, Stage::Finetune, "test")?;
    let text_trie = CodeTrie::build(&table.text, &vocab);
    let image_trie = CodeTrie::build(&table.image, &vocab);
    let rerank = rerank_flag || cfg.eval.rerank;
    let tasks: Vec<TaskKind> = [TaskKind::NigText, TaskKind::NigImage]
        .into_iter()
        .filter(|t| rerank || test.iter().any(|e| e.task == *t))
        .collect();
    // Embed the config in the report, minus machine-local paths, so the
    // report is comparable across work dirs.
    let mut embedded_config = serde_json::to_value(cfg)?;
    embedded_config
        .as_object_mut()
        .expect("config is an object")
        .remove("paths");
    let opts = EvalOptions {
        ks: cfg.eval.ks.clone(),
        beam_size: cfg.eval.beam_size,
        rerank,
        seed: cfg.seed,
        config: embedded_config,
    };
    let report = evaluate_run(
        &ModelRanker(&model),
        &text_trie,
        &image_trie,
        &test,
        &tasks,
        &opts,
    )?;

    let tsv = format_report_tsv(&report);
    std::fs::write(cfg.report_path("tsv"), &tsv)?;
    std::fs::write(cfg.report_path("json"), format_report_json(&report))?;

    let mut manifest = Manifest::new("evaluate", cfg.seed, config_hash(cfg));
    manifest.record_input(ckpt_path)?;
    manifest.record_input(&cfg.corpus_path(Stage::Finetune, "test"))?;
    manifest.record_input(&cfg.code_table_path())?;
    manifest.record_output(&cfg.report_path("tsv"))?;
    manifest.record_output(&cfg.report_path("json"))?;
    manifest.info = serde_json::json!({ "users": report.user_count, "rerank": rerank });
    manifest.save(&cfg.paths.work_dir)?;
    Ok(tsv)
}

/// Aggregate several evaluate JSON reports into one ablation-style table:
/// one row per (report, ranking source).
pub fn cmd_report(files: &[PathBuf]) -> Result<String> {
    if files.is_empty() {
        bail!("no report files given");
    }
    let mut rows: Vec<(String, String, serde_json::Value)> = Vec::new();
    let mut ks: Vec<u64> = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        let report: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing report {}", path.display()))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let these_ks: Vec<u64> = report["ks"]
            .as_array()
            .context("report missing ks")?
            .iter()
            .filter_map(|v| v.as_u64())
            .collect();
        if ks.is_empty() {
            ks = these_ks;
        } else if ks != these_ks {
            bail!("reports disagree on K values; cannot aggregate");
        }
        let per_task = report["per_task"]
            .as_object()
            .context("report missing per_task")?;
        for (task, row) in per_task {
            rows.push((label.clone(), task.clone(), row.clone()));
        }
    }

    let mut out = String::from("report\ttask");
    for k in &ks {
        out.push_str(&format!("\trecall@{k}"));
    }
    for k in &ks {
        out.push_str(&format!("\tndcg@{k}"));
    }
    out.push('\n');
    for (label, task, row) in rows {
        out.push_str(&format!("{label}\t{task}"));
        for metric in ["recall", "ndcg"] {
            for k in &ks {
                let v = row[metric][k.to_string()].as_f64().unwrap_or(f64::NAN);
                out.push_str(&format!("\t{v:.6}"));
            }
        }
        out.push('\n');
    }
    Ok(out)
}
