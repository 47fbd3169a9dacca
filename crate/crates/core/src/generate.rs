//! Trie-constrained beam search over code tokens, producing ranked item
//! lists, plus the two-list score fusion used for re-ranking.
//!
//! Every hypothesis is restricted to children of its trie node, so all
//! generated tuples map back to real items. Targets all have length L,
//! so scores are raw log-probability sums with no length normalization.

use crate::corpus::TaskKind;
use crate::ingest::ItemId;
use crate::quantlang::{ModalityCodeTable, Vocabulary, BOS_ID};
use crate::seq2seq::{Seq2SeqModel, Seq2SeqError};
use crate::autodiff::{log_softmax_row, NodeId, Tape};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("beam size must be >= 1")]
    BeamSizeZero,
    #[error("trie holds no items")]
    EmptyTrie,
    #[error("ranked list is empty")]
    EmptyList,
    #[error("score {0} outside [0, 1]; normalize lists before reranking")]
    Unnormalized(f64),
    #[error(transparent)]
    Model(#[from] Seq2SeqError),
}

/// Depth-L trie over code-token ids; leaves carry item ids.
#[derive(Debug, Clone)]
pub struct CodeTrie {
    pub levels: usize,
    root: TrieNode,
    n_items: usize,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, TrieNode>,
    item: Option<ItemId>,
}

impl CodeTrie {
    /// Build from an injective code table, keyed by token ids.
    pub fn build(table: &ModalityCodeTable, vocab: &Vocabulary) -> CodeTrie {
        let mut root = TrieNode::default();
        let mut n_items = 0;
        for (item, tuple) in &table.assignments {
            let ids = vocab
                .tuple_to_ids(table.modality, tuple)
                .expect("table tuples are in range");
            let mut node = &mut root;
            for id in ids {
                node = node.children.entry(id).or_default();
            }
            debug_assert!(node.item.is_none(), "table must be injective");
            node.item = Some(item.clone());
            n_items += 1;
        }
        CodeTrie {
            levels: vocab.levels,
            root,
            n_items,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    fn node(&self, prefix: &[u32]) -> Option<&TrieNode> {
        let mut node = &self.root;
        for id in prefix {
            node = node.children.get(id)?;
        }
        Some(node)
    }

    /// Item at a full root-to-leaf path, if present. O(L).
    pub fn item_at(&self, ids: &[u32]) -> Option<&ItemId> {
        self.node(ids)?.item.as_ref()
    }

    /// Allowed next token ids after a prefix.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        match self.node(prefix) {
            Some(node) => node.children.keys().copied().collect(),
            None => Vec::new(),
        }
    }
}

/// Ordered (item, score) pairs, descending score, ties by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub task: TaskKind,
    pub user: String,
    pub entries: Vec<(ItemId, f64)>,
}

impl RankedList {
    fn sorted(mut entries: Vec<(ItemId, f64)>, task: TaskKind, user: &str) -> RankedList {
        entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        RankedList {
            task,
            user: user.to_string(),
            entries,
        }
    }

    /// 1-based rank of an item, if present.
    pub fn rank_of(&self, item: &str) -> Option<usize> {
        self.entries.iter().position(|(id, _)| id == item).map(|p| p + 1)
    }
}

/// Incremental next-token scorer: encode once, decode per prefix.
pub struct ModelScorer<'a> {
    model: &'a Seq2SeqModel,
    tape: Tape,
    enc: NodeId,
    input_ids: Vec<u32>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Seq2SeqModel, input_ids: &[u32]) -> Result<Self, Seq2SeqError> {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, input_ids, &mut None)?;
        Ok(ModelScorer {
            model,
            tape,
            enc,
            input_ids: input_ids.to_vec(),
        })
    }
}

/// Log-probabilities of the next token given the generated prefix.
pub trait Scorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Vec<f64>;
}

impl Scorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Vec<f64> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(BOS_ID);
        dec_input.extend_from_slice(prefix);
        let logits = self
            .model
            .decode(&mut self.tape, self.enc, &self.input_ids, &dec_input, &mut None)
            .expect("prefix ids come from the vocabulary");
        let last = self.tape.value(logits).row(dec_input.len() - 1).to_vec();
        log_softmax_row(&last)
    }
}

/// Constrained beam search: exactly L steps, candidates restricted to
/// trie children, score = sum of per-token log-probs.
pub fn beam_search(
    scorer: &mut dyn Scorer,
    trie: &CodeTrie,
    beam_size: usize,
    task: TaskKind,
    user: &str,
) -> Result<RankedList, GenerateError> {
    if beam_size == 0 {
        return Err(GenerateError::BeamSizeZero);
    }
    if trie.n_items() == 0 {
        return Err(GenerateError::EmptyTrie);
    }
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for _step in 0..trie.levels {
        let mut candidates: Vec<(Vec<u32>, f64)> = Vec::new();
        for (prefix, score) in &beams {
            let logp = scorer.log_probs(prefix);
            for token in trie.children(prefix) {
                let mut next = prefix.clone();
                next.push(token);
                candidates.push((next, score + logp[token as usize]));
            }
        }
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        candidates.truncate(beam_size);
        beams = candidates;
    }
    let entries: Vec<(ItemId, f64)> = beams
        .into_iter()
        .map(|(ids, score)| {
            let item = trie
                .item_at(&ids)
                .expect("constrained paths end at leaves")
                .clone();
            (item, score)
        })
        .collect();
    Ok(RankedList::sorted(entries, task, user))
}

/// Map raw log-prob scores to [0, 1]: softmax over the list, then divide
/// by the max so the top item scores exactly 1. Order-preserving.
pub fn normalize_scores(list: &RankedList) -> Result<RankedList, GenerateError> {
    if list.entries.is_empty() {
        return Err(GenerateError::EmptyList);
    }
    let logps: Vec<f64> = list.entries.iter().map(|(_, s)| *s).collect();
    let probs: Vec<f64> = {
        let lp = log_softmax_row(&logps);
        lp.iter().map(|l| l.exp()).collect()
    };
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let entries = list
        .entries
        .iter()
        .zip(&probs)
        .map(|((id, _), &p)| (id.clone(), p / max))
        .collect();
    Ok(RankedList::sorted(entries, list.task, &list.user))
}

/// Two-list fusion: items in both lists score (s_t + s_v)/2 + 1,
/// single-list items keep their own normalized score, so every
/// both-list item outranks every single-list item.
pub fn rerank(text: &RankedList, image: &RankedList) -> Result<RankedList, GenerateError> {
    for list in [text, image] {
        for &(_, s) in &list.entries {
            if !(0.0..=1.0).contains(&s) {
                return Err(GenerateError::Unnormalized(s));
            }
        }
    }
    let mut fused: BTreeMap<ItemId, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for (id, s) in &text.entries {
        fused.entry(id.clone()).or_default().0 = Some(*s);
    }
    for (id, s) in &image.entries {
        fused.entry(id.clone()).or_default().1 = Some(*s);
    }
    let entries: Vec<(ItemId, f64)> = fused
        .into_iter()
        .map(|(id, scores)| {
            let s = match scores {
                (Some(st), Some(sv)) => (st + sv) / 2.0 + 1.0,
                (Some(st), None) => st,
                (None, Some(sv)) => sv,
                (None, None) => unreachable!("item came from one of the lists"),
            };
            (id, s)
        })
        .collect();
    Ok(RankedList::sorted(entries, text.task, &text.user))
}

/// Dump format: `<user>\t<task>\t<item>:<score>,...` per line.
pub fn format_ranked_lists(lists: &[RankedList]) -> String {
    let mut out = String::new();
    for list in lists {
        let entries: Vec<String> = list
            .entries
            .iter()
            .map(|(id, s)| format!("{id}:{s}"))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            list.user,
            list.task.name(),
            entries.join(",")
        ));
    }
    out
}
