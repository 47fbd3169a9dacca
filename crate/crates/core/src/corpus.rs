//! Training/evaluation example construction for the six quantitative
//! language generation tasks, with leave-one-out splits.
//!
//! NIG predicts the next item's tokens from a same-modality history, AIG
//! crosses modalities (image history -> text target and vice versa), and
//! QLA maps one item's tokens to the other modality's tokens. Each task
//! owns four dedicated prompt tokens prepended to the encoder input.

use crate::ingest::{InteractionDataset, ItemId, Modality, UserId};
use crate::quantlang::{ItemCodeTable, Vocabulary, EOS_ID};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Maximum history length in items (not tokens).
pub const MAX_HISTORY_ITEMS: usize = 20;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("no code tuple for item {0:?}")]
    MissingCode(ItemId),
    #[error("task {task:?} is not part of the {stage:?} stage")]
    IncompatibleTask { stage: Stage, task: TaskKind },
    #[error("stage {0:?} assembled with no examples")]
    Empty(Stage),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// The six generation tasks. NIG = next item generation, AIG = asymmetric
/// item generation, QLA = quantitative language alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    NigText,
    NigImage,
    AigText,
    AigImage,
    QlaTextToImage,
    QlaImageToText,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::NigText,
        TaskKind::NigImage,
        TaskKind::AigText,
        TaskKind::AigImage,
        TaskKind::QlaTextToImage,
        TaskKind::QlaImageToText,
    ];

    /// Stable index used for prompt-token allocation.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NigText => "nig_text",
            TaskKind::NigImage => "nig_image",
            TaskKind::AigText => "aig_text",
            TaskKind::AigImage => "aig_image",
            TaskKind::QlaTextToImage => "qla_text_to_image",
            TaskKind::QlaImageToText => "qla_image_to_text",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Modality of the tokens on the encoder side (after the prompt).
    pub fn input_modality(self) -> Modality {
        match self {
            TaskKind::NigText | TaskKind::AigImage | TaskKind::QlaTextToImage => Modality::Text,
            TaskKind::NigImage | TaskKind::AigText | TaskKind::QlaImageToText => Modality::Image,
        }
    }

    /// Modality of the generated target tokens.
    pub fn target_modality(self) -> Modality {
        match self {
            TaskKind::NigText | TaskKind::AigText | TaskKind::QlaImageToText => Modality::Text,
            TaskKind::NigImage | TaskKind::AigImage | TaskKind::QlaTextToImage => Modality::Image,
        }
    }

    pub fn is_history_task(self) -> bool {
        !matches!(self, TaskKind::QlaTextToImage | TaskKind::QlaImageToText)
    }
}

/// One serialized (input, target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub task: TaskKind,
    pub user: UserId,
    pub target_item: ItemId,
    /// Prompt tokens ++ history/item code tokens.
    pub input_ids: Vec<u32>,
    /// L code tokens ++ EOS.
    pub target_ids: Vec<u32>,
}

/// Per-user leave-one-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub user: UserId,
    /// Items before the second-to-last; also the validation history.
    pub train_prefix: Vec<ItemId>,
    pub valid_target: ItemId,
    pub test_target: ItemId,
}

impl UserSplit {
    /// Test history: everything before the last item.
    pub fn test_history(&self) -> Vec<ItemId> {
        let mut h = self.train_prefix.clone();
        h.push(self.valid_target.clone());
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaveOneOut {
    pub users: Vec<UserSplit>,
    /// Users dropped for having fewer than 3 interactions.
    pub excluded: Vec<UserId>,
}

/// Deterministic leave-one-out split: last item is the test target,
/// second-to-last the validation target.
pub fn split_leave_one_out(dataset: &InteractionDataset) -> LeaveOneOut {
    let mut users = Vec::new();
    let mut excluded = Vec::new();
    for (user, items) in &dataset.users {
        if items.len() < 3 {
            excluded.push(user.clone());
            continue;
        }
        let n = items.len();
        users.push(UserSplit {
            user: user.clone(),
            train_prefix: items[..n - 2].to_vec(),
            valid_target: items[n - 2].clone(),
            test_target: items[n - 1].clone(),
        });
    }
    LeaveOneOut { users, excluded }
}

/// Examples for one task across the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExamples {
    pub task: TaskKind,
    pub train: Vec<TaskExample>,
    pub valid: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

fn item_ids(
    table: &ItemCodeTable,
    vocab: &Vocabulary,
    modality: Modality,
    item: &str,
) -> Result<Vec<u32>, CorpusError> {
    let tuple = table
        .for_modality(modality)
        .lookup(item)
        .ok_or_else(|| CorpusError::MissingCode(item.to_string()))?;
    Ok(vocab
        .tuple_to_ids(modality, tuple)
        .expect("table tuples are in range"))
}

fn history_example(
    task: TaskKind,
    table: &ItemCodeTable,
    vocab: &Vocabulary,
    user: &str,
    history: &[ItemId],
    target: &str,
) -> Result<TaskExample, CorpusError> {
    let start = history.len().saturating_sub(MAX_HISTORY_ITEMS);
    let mut input_ids = vocab.prompt_ids(task.index());
    for item in &history[start..] {
        input_ids.extend(item_ids(table, vocab, task.input_modality(), item)?);
    }
    let mut target_ids = item_ids(table, vocab, task.target_modality(), target)?;
    target_ids.push(EOS_ID);
    Ok(TaskExample {
        task,
        user: user.to_string(),
        target_item: target.to_string(),
        input_ids,
        target_ids,
    })
}

/// Build a history-conditioned task (NIG or AIG). Train examples slide
/// over every position with at least one predecessor inside the train
/// prefix; valid/test use the leave-one-out targets.
pub fn build_history_task(
    task: TaskKind,
    split: &LeaveOneOut,
    table: &ItemCodeTable,
    vocab: &Vocabulary,
) -> Result<TaskExamples, CorpusError> {
    assert!(task.is_history_task(), "QLA has no history form");
    let mut out = TaskExamples {
        task,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for u in &split.users {
        for t in 1..u.train_prefix.len() {
            out.train.push(history_example(
                task,
                table,
                vocab,
                &u.user,
                &u.train_prefix[..t],
                &u.train_prefix[t],
            )?);
        }
        out.valid.push(history_example(
            task,
            table,
            vocab,
            &u.user,
            &u.train_prefix,
            &u.valid_target,
        )?);
        out.test.push(history_example(
            task,
            table,
            vocab,
            &u.user,
            &u.test_history(),
            &u.test_target,
        )?);
    }
    Ok(out)
}

pub fn build_nig(
    split: &LeaveOneOut,
    table: &ItemCodeTable,
    vocab: &Vocabulary,
    modality: Modality,
) -> Result<TaskExamples, CorpusError> {
    let task = match modality {
        Modality::Text => TaskKind::NigText,
        Modality::Image => TaskKind::NigImage,
    };
    build_history_task(task, split, table, vocab)
}

pub fn build_aig(
    split: &LeaveOneOut,
    table: &ItemCodeTable,
    vocab: &Vocabulary,
    target_modality: Modality,
) -> Result<TaskExamples, CorpusError> {
    let task = match target_modality {
        Modality::Text => TaskKind::AigText,
        Modality::Image => TaskKind::AigImage,
    };
    build_history_task(task, split, table, vocab)
}

/// Items appearing in any user's train prefix, deduplicated and sorted.
pub fn train_history_items(split: &LeaveOneOut) -> Vec<ItemId> {
    let mut items: Vec<ItemId> = split
        .users
        .iter()
        .flat_map(|u| u.train_prefix.iter().cloned())
        .collect();
    items.sort();
    items.dedup();
    items
}

/// One alignment example per item: source-modality tokens in, the other
/// modality's tokens out. Train split only.
pub fn build_qla(
    items: &[ItemId],
    table: &ItemCodeTable,
    vocab: &Vocabulary,
    direction: TaskKind,
) -> Result<TaskExamples, CorpusError> {
    assert!(!direction.is_history_task(), "expected a QLA task");
    let mut train = Vec::with_capacity(items.len());
    for item in items {
        let mut input_ids = vocab.prompt_ids(direction.index());
        input_ids.extend(item_ids(table, vocab, direction.input_modality(), item)?);
        let mut target_ids = item_ids(table, vocab, direction.target_modality(), item)?;
        target_ids.push(EOS_ID);
        train.push(TaskExample {
            task: direction,
            user: "-".to_string(),
            target_item: item.clone(),
            input_ids,
            target_ids,
        });
    }
    Ok(TaskExamples {
        task: direction,
        train,
        valid: Vec::new(),
        test: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn allows(self, task: TaskKind) -> bool {
        match self {
            Stage::Pretrain => matches!(task, TaskKind::NigText | TaskKind::NigImage),
            Stage::Finetune => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Assembled multi-task dataset for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub stage: Stage,
    pub train: Vec<TaskExample>,
    pub valid: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    /// Train-example count per task name.
    pub task_mix: BTreeMap<&'static str, usize>,
}

/// Concatenate per-task examples, validate stage compatibility, and
/// shuffle the train split with a fixed seed.
pub fn assemble_stage(
    stage: Stage,
    parts: Vec<TaskExamples>,
    seed: u64,
) -> Result<SplitDataset, CorpusError> {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut task_mix = BTreeMap::new();
    for part in parts {
        if !stage.allows(part.task) {
            return Err(CorpusError::IncompatibleTask {
                stage,
                task: part.task,
            });
        }
        *task_mix.entry(part.task.name()).or_insert(0) += part.train.len();
        train.extend(part.train);
        valid.extend(part.valid);
        test.extend(part.test);
    }
    if train.is_empty() {
        return Err(CorpusError::Empty(stage));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train.shuffle(&mut rng);
    Ok(SplitDataset {
        stage,
        train,
        valid,
        test,
        task_mix,
    })
}

/// Build every task a stage needs and assemble it.
pub fn build_stage_dataset(
    stage: Stage,
    split: &LeaveOneOut,
    table: &ItemCodeTable,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<SplitDataset, CorpusError> {
    let mut parts = vec![
        build_nig(split, table, vocab, Modality::Text)?,
        build_nig(split, table, vocab, Modality::Image)?,
    ];
    if stage == Stage::Finetune {
        parts.push(build_aig(split, table, vocab, Modality::Text)?);
        parts.push(build_aig(split, table, vocab, Modality::Image)?);
        let items = train_history_items(split);
        parts.push(build_qla(&items, table, vocab, TaskKind::QlaTextToImage)?);
        parts.push(build_qla(&items, table, vocab, TaskKind::QlaImageToText)?);
    }
    assemble_stage(stage, parts, seed)
}

fn ids_to_string(ids: &[u32]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<u32>, CorpusError> {
    s.split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| CorpusError::Parse {
                line,
                msg: format!("bad token id {t:?}"),
            })
        })
        .collect()
}

/// One example per line:
/// `<task>\t<user>\t<target_item>\t<input ids>\t<target ids>`.
pub fn format_examples(examples: &[TaskExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.task.name(),
            e.user,
            e.target_item,
            ids_to_string(&e.input_ids),
            ids_to_string(&e.target_ids)
        ));
    }
    out
}

pub fn parse_examples(text: &str) -> Result<Vec<TaskExample>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(CorpusError::Parse {
                line: line_no,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let task = TaskKind::parse(fields[0]).ok_or_else(|| CorpusError::Parse {
            line: line_no,
            msg: format!("unknown task {:?}", fields[0]),
        })?;
        out.push(TaskExample {
            task,
            user: fields[1].to_string(),
            target_item: fields[2].to_string(),
            input_ids: parse_ids(fields[3], line_no)?,
            target_ids: parse_ids(fields[4], line_no)?,
        });
    }
    Ok(out)
}
