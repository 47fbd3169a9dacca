//! Leave-one-out full-ranking evaluation: Recall@K and NDCG@K averaged
//! over users, with optional two-list fusion before scoring.

use crate::corpus::TaskKind;
use crate::generate::{
    beam_search, normalize_scores, rerank, CodeTrie, GenerateError, ModelScorer, RankedList,
};
use crate::corpus::TaskExample;
use crate::ingest::Modality;
use crate::seq2seq::Seq2SeqModel;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty test split")]
    EmptyTestSplit,
    #[error("re-ranking requires both NIG tasks; {0} is missing")]
    MissingTaskForRerank(&'static str),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

/// 1 iff the target ranks within the top K.
pub fn recall_at_k(ranked: &RankedList, target: &str, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(rank) if rank <= k => 1.0,
        _ => 0.0,
    }
}

/// 1/log2(rank+1) if the target ranks within the top K, else 0. With a
/// single relevant item the ideal DCG is 1, so this is already normalized.
pub fn ndcg_at_k(ranked: &RankedList, target: &str, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(rank) if rank <= k => 1.0 / ((rank + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Mean metrics for one ranking source, keyed by K.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MetricsRow {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    /// Keyed by task name, plus "fused" when re-ranking is enabled.
    pub per_task: BTreeMap<String, MetricsRow>,
    pub user_count: usize,
    pub beam_size: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub beam_size: usize,
    /// Fuse the NIG text and image ranked lists before scoring.
    pub rerank: bool,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![1, 5, 10],
            beam_size: 20,
            rerank: false,
            seed: 0,
            config: serde_json::Value::Null,
        }
    }
}

/// Produces a ranked list for one test example. Abstracted so oracle and
/// null rankers can drive the same evaluation loop in tests.
pub trait Ranker {
    fn rank(
        &self,
        example: &TaskExample,
        trie: &CodeTrie,
        beam_size: usize,
    ) -> Result<RankedList, GenerateError>;
}

/// Beam search against a trained model.
pub struct ModelRanker<'a>(pub &'a Seq2SeqModel);

impl Ranker for ModelRanker<'_> {
    fn rank(
        &self,
        example: &TaskExample,
        trie: &CodeTrie,
        beam_size: usize,
    ) -> Result<RankedList, GenerateError> {
        let mut scorer = ModelScorer::new(self.0, &example.input_ids)?;
        beam_search(&mut scorer, trie, beam_size, example.task, &example.user)
    }
}

fn trie_for<'t>(task: TaskKind, text: &'t CodeTrie, image: &'t CodeTrie) -> &'t CodeTrie {
    match task.target_modality() {
        Modality::Text => text,
        Modality::Image => image,
    }
}

/// Evaluate every requested task over the test split, averaging per-user
/// metrics. Users are processed in sorted order, so the result is
/// deterministic given (weights, split, beam size).
pub fn evaluate_run(
    ranker: &dyn Ranker,
    text_trie: &CodeTrie,
    image_trie: &CodeTrie,
    test: &[TaskExample],
    tasks: &[TaskKind],
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    if opts.rerank {
        for t in [TaskKind::NigText, TaskKind::NigImage] {
            if !tasks.contains(&t) {
                return Err(EvalError::MissingTaskForRerank(t.name()));
            }
        }
    }

    // user -> task -> example
    let mut by_user: BTreeMap<&str, BTreeMap<TaskKind, &TaskExample>> = BTreeMap::new();
    for e in test {
        by_user.entry(&e.user).or_default().insert(e.task, e);
    }

    let mut sums: BTreeMap<String, MetricsRow> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut add = |key: &str, list: &RankedList, target: &str, ks: &[usize]| {
        let row = sums.entry(key.to_string()).or_default();
        for &k in ks {
            *row.recall.entry(k).or_insert(0.0) += recall_at_k(list, target, k);
            *row.ndcg.entry(k).or_insert(0.0) += ndcg_at_k(list, target, k);
        }
        *counts.entry(key.to_string()).or_insert(0) += 1;
    };

    for per_task in by_user.values() {
        let mut nig_lists: BTreeMap<TaskKind, (RankedList, String)> = BTreeMap::new();
        for &task in tasks {
            let Some(example) = per_task.get(&task) else {
                continue;
            };
            let trie = trie_for(task, text_trie, image_trie);
            let list = ranker.rank(example, trie, opts.beam_size)?;
            add(task.name(), &list, &example.target_item, &opts.ks);
            if opts.rerank && matches!(task, TaskKind::NigText | TaskKind::NigImage) {
                nig_lists.insert(task, (list, example.target_item.clone()));
            }
        }
        if opts.rerank {
            if let (Some((t_list, target)), Some((v_list, _))) = (
                nig_lists.get(&TaskKind::NigText),
                nig_lists.get(&TaskKind::NigImage),
            ) {
                let fused = rerank(&normalize_scores(t_list)?, &normalize_scores(v_list)?)?;
                add("fused", &fused, target, &opts.ks);
            }
        }
    }

    let per_task = sums
        .into_iter()
        .map(|(key, row)| {
            let n = counts[&key] as f64;
            let mean = MetricsRow {
                recall: row.recall.into_iter().map(|(k, v)| (k, v / n)).collect(),
                ndcg: row.ndcg.into_iter().map(|(k, v)| (k, v / n)).collect(),
            };
            (key, mean)
        })
        .collect();

    Ok(MetricsReport {
        ks: opts.ks.clone(),
        per_task,
        user_count: by_user.len(),
        beam_size: opts.beam_size,
        seed: opts.seed,
        config: opts.config.clone(),
    })
}

/// TSV layout: header `task<TAB>recall@K...<TAB>ndcg@K...`, one row per
/// ranking source.
pub fn format_report_tsv(report: &MetricsReport) -> String {
    let mut out = String::from("task");
    for k in &report.ks {
        out.push_str(&format!("\trecall@{k}"));
    }
    for k in &report.ks {
        out.push_str(&format!("\tndcg@{k}"));
    }
    out.push('\n');
    for (task, row) in &report.per_task {
        out.push_str(task);
        for k in &report.ks {
            out.push_str(&format!("\t{:.6}", row.recall[k]));
        }
        for k in &report.ks {
            out.push_str(&format!("\t{:.6}", row.ndcg[k]));
        }
        out.push('\n');
    }
    out
}

pub fn format_report_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantlang::{build_vocabulary, ModalityCodeTable, Vocabulary};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;
    use std::collections::HashMap;

    fn ranked(entries: &[(&str, f64)]) -> RankedList {
        RankedList {
            task: TaskKind::NigText,
            user: "u".into(),
            entries: entries.iter().map(|(i, s)| (i.to_string(), *s)).collect(),
        }
    }

    #[test]
    fn metric_analytic_examples() {
        let l = ranked(&[
            ("a", 0.9),
            ("b", 0.8),
            ("c", 0.7),
            ("d", 0.6),
            ("e", 0.5),
            ("f", 0.4),
        ]);
        assert_eq!(recall_at_k(&l, "a", 1), 1.0);
        assert_eq!(recall_at_k(&l, "f", 5), 0.0);
        assert_eq!(recall_at_k(&l, "f", 6), 1.0);
        assert_eq!(ndcg_at_k(&l, "a", 1), 1.0);
        // rank 3 -> 1/log2(4) = 0.5
        assert!((ndcg_at_k(&l, "c", 5) - 0.5).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&l, "c", 2), 0.0);
        assert_eq!(recall_at_k(&l, "missing", 10), 0.0);
        assert_eq!(ndcg_at_k(&l, "missing", 10), 0.0);
    }

    #[test]
    fn metrics_match_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let n = rng.gen_range(1..40);
            let entries: Vec<(String, f64)> =
                (0..n).map(|i| (format!("i{i}"), -(i as f64))).collect();
            let l = RankedList {
                task: TaskKind::NigText,
                user: "u".into(),
                entries,
            };
            let target = format!("i{}", rng.gen_range(0..60));
            let k = rng.gen_range(1..15);
            // linear-scan oracle
            let mut oracle_recall = 0.0;
            let mut oracle_ndcg = 0.0;
            for (pos, (id, _)) in l.entries.iter().enumerate() {
                if *id == target && pos < k {
                    oracle_recall = 1.0;
                    oracle_ndcg = 1.0 / ((pos + 2) as f64).log2();
                }
            }
            assert_eq!(recall_at_k(&l, &target, k), oracle_recall);
            assert_eq!(ndcg_at_k(&l, &target, k), oracle_ndcg);
        }
    }

    fn toy_world(
        n_items: usize,
    ) -> (Vocabulary, CodeTrie, CodeTrie, Vec<String>) {
        let k = 8;
        let levels = 3;
        let vocab = build_vocabulary(levels, k, 6).unwrap();
        let items: Vec<String> = (0..n_items).map(|i| format!("i{i:03}")).collect();
        let tuple = |seed: usize| -> Vec<usize> {
            (0..levels).map(|l| (seed / k.pow(l as u32)) % k).collect()
        };
        let text = ModalityCodeTable::from_assignments(
            Modality::Text,
            items.iter().enumerate().map(|(i, id)| (id.clone(), tuple(i))).collect(),
            HashMap::new(),
        );
        let image = ModalityCodeTable::from_assignments(
            Modality::Image,
            items
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), tuple(n_items - 1 - i)))
                .collect(),
            HashMap::new(),
        );
        let text_trie = CodeTrie::build(&text, &vocab);
        let image_trie = CodeTrie::build(&image, &vocab);
        (vocab, text_trie, image_trie, items)
    }

    fn test_example(task: TaskKind, user: &str, target: &str) -> TaskExample {
        TaskExample {
            task,
            user: user.into(),
            target_item: target.into(),
            input_ids: vec![3],
            target_ids: vec![2],
        }
    }

    /// Always puts the target first.
    struct PerfectRanker;
    impl Ranker for PerfectRanker {
        fn rank(
            &self,
            example: &TaskExample,
            _trie: &CodeTrie,
            beam_size: usize,
        ) -> Result<RankedList, GenerateError> {
            let mut entries = vec![(example.target_item.clone(), 0.0)];
            for i in 1..beam_size {
                entries.push((format!("zfill{i}"), -(i as f64)));
            }
            Ok(RankedList {
                task: example.task,
                user: example.user.clone(),
                entries,
            })
        }
    }

    /// Uniformly random permutation of all items, fresh per call.
    struct RandomRanker {
        items: Vec<String>,
        rng: RefCell<ChaCha8Rng>,
    }
    impl Ranker for RandomRanker {
        fn rank(
            &self,
            example: &TaskExample,
            _trie: &CodeTrie,
            beam_size: usize,
        ) -> Result<RankedList, GenerateError> {
            let mut items = self.items.clone();
            items.shuffle(&mut *self.rng.borrow_mut());
            let entries = items
                .into_iter()
                .take(beam_size)
                .enumerate()
                .map(|(i, id)| (id, -(i as f64)))
                .collect();
            Ok(RankedList {
                task: example.task,
                user: example.user.clone(),
                entries,
            })
        }
    }

    #[test]
    fn perfect_ranker_scores_recall_one() {
        let (_, text_trie, image_trie, items) = toy_world(20);
        let test: Vec<TaskExample> = (0..10)
            .map(|u| test_example(TaskKind::NigText, &format!("u{u}"), &items[u]))
            .collect();
        let report = evaluate_run(
            &PerfectRanker,
            &text_trie,
            &image_trie,
            &test,
            &[TaskKind::NigText],
            &EvalOptions::default(),
        )
        .unwrap();
        let row = &report.per_task["nig_text"];
        assert_eq!(row.recall[&1], 1.0);
        assert_eq!(row.ndcg[&10], 1.0);
        assert_eq!(report.user_count, 10);
    }

    #[test]
    fn random_ranker_matches_constrained_null_expectation() {
        let n_items = 50;
        let (_, text_trie, image_trie, items) = toy_world(n_items);
        let n_users = 400;
        let test: Vec<TaskExample> = (0..n_users)
            .map(|u| {
                test_example(
                    TaskKind::NigText,
                    &format!("u{u:04}"),
                    &items[u % n_items],
                )
            })
            .collect();
        let ranker = RandomRanker {
            items: items.clone(),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(7)),
        };
        let report = evaluate_run(
            &ranker,
            &text_trie,
            &image_trie,
            &test,
            &[TaskKind::NigText],
            &EvalOptions::default(),
        )
        .unwrap();
        let p = 10.0 / n_items as f64;
        let sigma = (p * (1.0 - p) / n_users as f64).sqrt();
        let got = report.per_task["nig_text"].recall[&10];
        assert!(
            (got - p).abs() < 3.0 * sigma,
            "recall@10 {got} vs expectation {p} (sigma {sigma})"
        );
    }

    #[test]
    fn recall_is_monotone_in_k_and_ndcg1_equals_recall1() {
        let (_, text_trie, image_trie, items) = toy_world(30);
        let ranker = RandomRanker {
            items: items.clone(),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(3)),
        };
        let test: Vec<TaskExample> = (0..50)
            .map(|u| test_example(TaskKind::NigText, &format!("u{u:03}"), &items[u % 30]))
            .collect();
        let report = evaluate_run(
            &ranker,
            &text_trie,
            &image_trie,
            &test,
            &[TaskKind::NigText],
            &EvalOptions::default(),
        )
        .unwrap();
        let row = &report.per_task["nig_text"];
        assert!(row.recall[&1] <= row.recall[&5]);
        assert!(row.recall[&5] <= row.recall[&10]);
        assert_eq!(row.recall[&1], row.ndcg[&1]);
        for k in [1, 5, 10] {
            assert!(row.ndcg[&k] <= 1.0);
        }
    }

    #[test]
    fn rerank_adds_fused_row_and_requires_both_tasks() {
        let (_, text_trie, image_trie, items) = toy_world(20);
        let mut test = Vec::new();
        for u in 0..5 {
            test.push(test_example(TaskKind::NigText, &format!("u{u}"), &items[u]));
            test.push(test_example(TaskKind::NigImage, &format!("u{u}"), &items[u]));
        }
        let opts = EvalOptions {
            rerank: true,
            ..EvalOptions::default()
        };
        let report = evaluate_run(
            &PerfectRanker,
            &text_trie,
            &image_trie,
            &test,
            &[TaskKind::NigText, TaskKind::NigImage],
            &opts,
        )
        .unwrap();
        assert!(report.per_task.contains_key("fused"));
        assert_eq!(report.per_task["fused"].recall[&1], 1.0);

        assert!(matches!(
            evaluate_run(
                &PerfectRanker,
                &text_trie,
                &image_trie,
                &test,
                &[TaskKind::NigText],
                &opts,
            )
            .unwrap_err(),
            EvalError::MissingTaskForRerank(_)
        ));
    }

    #[test]
    fn empty_test_split_rejected() {
        let (_, text_trie, image_trie, _) = toy_world(5);
        assert!(matches!(
            evaluate_run(
                &PerfectRanker,
                &text_trie,
                &image_trie,
                &[],
                &[TaskKind::NigText],
                &EvalOptions::default(),
            )
            .unwrap_err(),
            EvalError::EmptyTestSplit
        ));
    }

    #[test]
    fn report_formats_are_stable() {
        let (_, text_trie, image_trie, items) = toy_world(10);
        let test = vec![test_example(TaskKind::NigText, "u0", &items[0])];
        let report = evaluate_run(
            &PerfectRanker,
            &text_trie,
            &image_trie,
            &test,
            &[TaskKind::NigText],
            &EvalOptions::default(),
        )
        .unwrap();
        let tsv = format_report_tsv(&report);
        assert!(tsv.starts_with("task\trecall@1\trecall@5\trecall@10\tndcg@1\tndcg@5\tndcg@10\n"));
        assert!(tsv.contains("nig_text\t1.000000"));
        let json: serde_json::Value =
            serde_json::from_str(&format_report_json(&report)).unwrap();
        assert_eq!(json["user_count"], 1);
        assert_eq!(json["per_task"]["nig_text"]["recall"]["1"], 1.0);
    }
}
