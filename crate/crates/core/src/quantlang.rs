//! The shared token vocabulary, code-tuple serialization, and collision
//! resolution.
//!
//! Text code tokens carry lowercase level prefixes (`<a_2><b_3>...`),
//! image tokens uppercase (`<A_1><B_4>...`); with L levels of K codes per
//! modality the dictionary holds 2LK code tokens plus specials and four
//! prompt tokens per task. Colliding items are reallocated by distance,
//! last level first, backing off one level at a time when a prefix is
//! exhausted.

use crate::ingest::{ItemId, Modality};
use crate::rqvae::QuantizationResult;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const N_SPECIALS: usize = 3;
pub const PROMPT_TOKENS_PER_TASK: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QuantLangError {
    #[error("levels {0} exceeds the 26 available prefix letters")]
    TooManyLevels(usize),
    #[error("codebook size must be >= 2, got {0}")]
    InvalidCodebookSize(usize),
    #[error("code {code} at level {level} out of range [0, {k})")]
    OutOfRange { level: usize, code: usize, k: usize },
    #[error("token sequence mixes modalities")]
    MixedModality,
    #[error("expected level {expected} token, got level {got}")]
    WrongLevelOrder { expected: usize, got: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("expected {expected} code tokens, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("item id sets differ between modalities")]
    IdSetMismatch,
    #[error("code space exhausted while reassigning item {0:?}")]
    CapacityExhausted(ItemId),
    #[error("duplicate item {0:?} in quantization results")]
    DuplicateItem(ItemId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Token vocabulary shared by both modalities and all tasks.
///
/// Id layout: specials, text code tokens level-major, image code tokens
/// level-major, prompt tokens task-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub levels: usize,
    pub codebook_size: usize,
    pub task_count: usize,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

fn level_letter(modality: Modality, level: usize) -> char {
    let base = match modality {
        Modality::Text => b'a',
        Modality::Image => b'A',
    };
    (base + level as u8) as char
}

pub fn build_vocabulary(
    levels: usize,
    codebook_size: usize,
    task_count: usize,
) -> Result<Vocabulary, QuantLangError> {
    if levels == 0 || levels > 26 {
        return Err(QuantLangError::TooManyLevels(levels));
    }
    if codebook_size < 2 {
        return Err(QuantLangError::InvalidCodebookSize(codebook_size));
    }
    let mut tokens = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
    for modality in [Modality::Text, Modality::Image] {
        for level in 0..levels {
            let letter = level_letter(modality, level);
            for code in 0..codebook_size {
                tokens.push(format!("<{letter}_{code}>"));
            }
        }
    }
    for p in 0..task_count * PROMPT_TOKENS_PER_TASK {
        tokens.push(format!("<p_{p}>"));
    }
    let token_to_id = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(Vocabulary {
        levels,
        codebook_size,
        task_count,
        tokens,
        token_to_id,
    })
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_code_tokens(&self) -> usize {
        2 * self.levels * self.codebook_size
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Id of a code token, computed from the layout.
    pub fn code_token_id(
        &self,
        modality: Modality,
        level: usize,
        code: usize,
    ) -> Result<u32, QuantLangError> {
        if level >= self.levels || code >= self.codebook_size {
            return Err(QuantLangError::OutOfRange {
                level,
                code,
                k: self.codebook_size,
            });
        }
        let modality_offset = match modality {
            Modality::Text => 0,
            Modality::Image => self.levels * self.codebook_size,
        };
        Ok((N_SPECIALS + modality_offset + level * self.codebook_size + code) as u32)
    }

    /// Decompose a code-token id back into (modality, level, code).
    /// Returns None for specials and prompt tokens.
    pub fn parse_code_id(&self, id: u32) -> Option<(Modality, usize, usize)> {
        let id = id as usize;
        if id < N_SPECIALS {
            return None;
        }
        let rel = id - N_SPECIALS;
        let per_modality = self.levels * self.codebook_size;
        if rel >= 2 * per_modality {
            return None;
        }
        let (modality, rel) = if rel < per_modality {
            (Modality::Text, rel)
        } else {
            (Modality::Image, rel - per_modality)
        };
        Some((modality, rel / self.codebook_size, rel % self.codebook_size))
    }

    /// Modality and level from a token string's prefix letter alone.
    pub fn classify_token(token: &str) -> Option<(Modality, usize)> {
        let inner = token.strip_prefix('<')?.strip_suffix('>')?;
        let (letter, _) = inner.split_once('_')?;
        let c = letter.chars().next()?;
        if letter.len() != 1 {
            return None;
        }
        if c.is_ascii_lowercase() && c != 'p' {
            Some((Modality::Text, (c as u8 - b'a') as usize))
        } else if c.is_ascii_uppercase() {
            Some((Modality::Image, (c as u8 - b'A') as usize))
        } else {
            None
        }
    }

    /// The four prompt-token ids owned by a task.
    pub fn prompt_ids(&self, task_index: usize) -> Vec<u32> {
        let base = N_SPECIALS + self.n_code_tokens() + task_index * PROMPT_TOKENS_PER_TASK;
        (base..base + PROMPT_TOKENS_PER_TASK)
            .map(|i| i as u32)
            .collect()
    }

    /// Serialize a code tuple into level-prefixed tokens.
    pub fn tuple_to_tokens(
        &self,
        modality: Modality,
        code: &[usize],
    ) -> Result<Vec<String>, QuantLangError> {
        if code.len() != self.levels {
            return Err(QuantLangError::WrongLength {
                expected: self.levels,
                got: code.len(),
            });
        }
        code.iter()
            .enumerate()
            .map(|(level, &c)| {
                if c >= self.codebook_size {
                    return Err(QuantLangError::OutOfRange {
                        level,
                        code: c,
                        k: self.codebook_size,
                    });
                }
                Ok(format!("<{}_{c}>", level_letter(modality, level)))
            })
            .collect()
    }

    /// Serialize a code tuple into token ids.
    pub fn tuple_to_ids(
        &self,
        modality: Modality,
        code: &[usize],
    ) -> Result<Vec<u32>, QuantLangError> {
        if code.len() != self.levels {
            return Err(QuantLangError::WrongLength {
                expected: self.levels,
                got: code.len(),
            });
        }
        code.iter()
            .enumerate()
            .map(|(level, &c)| self.code_token_id(modality, level, c))
            .collect()
    }

    /// Exact inverse of [`Vocabulary::tuple_to_tokens`]: L code tokens of a
    /// single modality in level order.
    pub fn tokens_to_tuple(&self, tokens: &[String]) -> Result<(Modality, Vec<usize>), QuantLangError> {
        if tokens.len() != self.levels {
            return Err(QuantLangError::WrongLength {
                expected: self.levels,
                got: tokens.len(),
            });
        }
        let mut modality: Option<Modality> = None;
        let mut code = Vec::with_capacity(self.levels);
        for (expected_level, token) in tokens.iter().enumerate() {
            let id = self
                .token_to_id(token)
                .ok_or_else(|| QuantLangError::UnknownToken(token.clone()))?;
            let (m, level, c) = self
                .parse_code_id(id)
                .ok_or_else(|| QuantLangError::UnknownToken(token.clone()))?;
            match modality {
                None => modality = Some(m),
                Some(prev) if prev != m => return Err(QuantLangError::MixedModality),
                _ => {}
            }
            if level != expected_level {
                return Err(QuantLangError::WrongLevelOrder {
                    expected: expected_level,
                    got: level,
                });
            }
            code.push(c);
        }
        Ok((modality.expect("levels >= 1"), code))
    }
}

/// How an item's final tuple relates to its original quantization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    /// Levels (0-based) whose codes were changed during reassignment.
    Reassigned(Vec<usize>),
}

/// Injective item -> code-tuple assignment for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityCodeTable {
    pub modality: Modality,
    /// Assignment order is the input (quantization result) order.
    pub assignments: Vec<(ItemId, Vec<usize>)>,
    index: HashMap<ItemId, usize>,
    pub provenance: HashMap<ItemId, Provenance>,
}

impl ModalityCodeTable {
    pub fn from_assignments(
        modality: Modality,
        assignments: Vec<(ItemId, Vec<usize>)>,
        provenance: HashMap<ItemId, Provenance>,
    ) -> Self {
        let index = assignments
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), i))
            .collect();
        ModalityCodeTable {
            modality,
            assignments,
            index,
            provenance,
        }
    }

    pub fn lookup(&self, item: &str) -> Option<&[usize]> {
        self.index
            .get(item)
            .map(|&i| self.assignments[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn is_injective(&self) -> bool {
        let distinct: std::collections::HashSet<&Vec<usize>> =
            self.assignments.iter().map(|(_, t)| t).collect();
        distinct.len() == self.assignments.len()
    }
}

/// Combined per-item code tuples for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCodeTable {
    pub text: ModalityCodeTable,
    pub image: ModalityCodeTable,
}

impl ItemCodeTable {
    pub fn for_modality(&self, modality: Modality) -> &ModalityCodeTable {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }
}

pub fn merge_modalities(
    text: ModalityCodeTable,
    image: ModalityCodeTable,
) -> Result<ItemCodeTable, QuantLangError> {
    let text_ids: std::collections::HashSet<&ItemId> =
        text.assignments.iter().map(|(id, _)| id).collect();
    let image_ids: std::collections::HashSet<&ItemId> =
        image.assignments.iter().map(|(id, _)| id).collect();
    if text_ids != image_ids {
        return Err(QuantLangError::IdSetMismatch);
    }
    Ok(ItemCodeTable { text, image })
}

/// Occupancy trie over code tuples, with per-subtree occupied-leaf counts
/// for exhaustion pruning.
#[derive(Debug, Clone)]
pub struct OccupancyTrie {
    k: usize,
    levels: usize,
    root: TrieNode,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<usize, TrieNode>,
    occupied: usize,
}

impl OccupancyTrie {
    pub fn new(k: usize, levels: usize) -> Self {
        OccupancyTrie {
            k,
            levels,
            root: TrieNode::default(),
        }
    }

    /// Insert a full tuple; returns false if it was already present.
    pub fn insert(&mut self, tuple: &[usize]) -> bool {
        debug_assert_eq!(tuple.len(), self.levels);
        if self.contains(tuple) {
            return false;
        }
        let mut node = &mut self.root;
        node.occupied += 1;
        for &c in tuple {
            node = node.children.entry(c).or_default();
            node.occupied += 1;
        }
        true
    }

    pub fn contains(&self, tuple: &[usize]) -> bool {
        let mut node = &self.root;
        for &c in tuple {
            match node.children.get(&c) {
                Some(n) => node = n,
                None => return false,
            }
        }
        node.occupied > 0
    }

    /// Occupied leaves under a prefix.
    pub fn occupied_under(&self, prefix: &[usize]) -> usize {
        let mut node = &self.root;
        for &c in prefix {
            match node.children.get(&c) {
                Some(n) => node = n,
                None => return 0,
            }
        }
        node.occupied
    }

    /// True when every tuple extending the prefix is taken.
    pub fn subtree_full(&self, prefix: &[usize]) -> bool {
        let remaining = self.levels - prefix.len();
        let capacity = (self.k as u128).pow(remaining as u32);
        self.occupied_under(prefix) as u128 >= capacity
    }
}

/// Resolve colliding tuples by distance-ordered reallocation.
///
/// Colliding groups are processed in lexicographic order of their shared
/// tuple; within a group items are sorted by their minimum last-level
/// distance (ties by item id) and the closest item keeps the original
/// tuple. Reassignment scans the last level in ascending distance order,
/// backing off one level at a time when every extension of the kept
/// prefix is occupied. Occupancy is global, so the output is injective
/// across all items, not just within a group.
pub fn resolve_collisions(
    results: &[(ItemId, QuantizationResult)],
    k: usize,
    levels: usize,
    modality: Modality,
) -> Result<ModalityCodeTable, QuantLangError> {
    let mut seen_items = std::collections::HashSet::new();
    for (id, _) in results {
        if !seen_items.insert(id) {
            return Err(QuantLangError::DuplicateItem(id.clone()));
        }
    }

    // group indexes by original tuple
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, (_, q)) in results.iter().enumerate() {
        groups.entry(q.code.clone()).or_default().push(i);
    }

    let mut trie = OccupancyTrie::new(k, levels);
    let mut assigned: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut provenance: HashMap<ItemId, Provenance> = HashMap::new();

    // non-colliding items keep their tuples and occupy them up front
    for (tuple, members) in &groups {
        if members.len() == 1 {
            trie.insert(tuple);
            assigned.insert(members[0], tuple.clone());
            provenance.insert(results[members[0]].0.clone(), Provenance::Original);
        }
    }

    // colliding groups, in lexicographic order of the shared tuple
    for (tuple, members) in groups.iter().filter(|(_, m)| m.len() > 1) {
        let mut order: Vec<usize> = members.clone();
        order.sort_by(|&a, &b| {
            let da = min_last_level_distance(&results[a].1);
            let db = min_last_level_distance(&results[b].1);
            da.partial_cmp(&db)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| results[a].0.cmp(&results[b].0))
        });
        for (rank, &idx) in order.iter().enumerate() {
            let (id, q) = &results[idx];
            if rank == 0 && trie.insert(tuple) {
                assigned.insert(idx, tuple.clone());
                provenance.insert(id.clone(), Provenance::Original);
                continue;
            }
            let ranks = distance_rankings(q, k);
            match reassign(&trie, tuple, &ranks, levels) {
                Some(new_tuple) => {
                    trie.insert(&new_tuple);
                    let changed: Vec<usize> = (0..levels)
                        .filter(|&l| new_tuple[l] != tuple[l])
                        .collect();
                    provenance.insert(
                        id.clone(),
                        if changed.is_empty() {
                            Provenance::Original
                        } else {
                            Provenance::Reassigned(changed)
                        },
                    );
                    assigned.insert(idx, new_tuple);
                }
                None => return Err(QuantLangError::CapacityExhausted(id.clone())),
            }
        }
    }

    let assignments: Vec<(ItemId, Vec<usize>)> = results
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), assigned.remove(&i).expect("all items assigned")))
        .collect();
    Ok(ModalityCodeTable::from_assignments(
        modality,
        assignments,
        provenance,
    ))
}

fn min_last_level_distance(q: &QuantizationResult) -> f64 {
    q.level_distances
        .last()
        .expect("at least one level")
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Per-level code order by ascending distance, ties by smaller code index.
fn distance_rankings(q: &QuantizationResult, k: usize) -> Vec<Vec<usize>> {
    q.level_distances
        .iter()
        .map(|dists| {
            debug_assert_eq!(dists.len(), k);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                dists[a]
                    .partial_cmp(&dists[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order
        })
        .collect()
}

/// Find the first free tuple: start by rescanning only the last level
/// under the original prefix, then widen one level at a time. Within a
/// stage, levels are scanned outer-to-inner in ascending distance order.
fn reassign(
    trie: &OccupancyTrie,
    original: &[usize],
    ranks: &[Vec<usize>],
    levels: usize,
) -> Option<Vec<usize>> {
    for start_level in (0..levels).rev() {
        let prefix = &original[..start_level];
        if trie.subtree_full(prefix) {
            continue;
        }
        let mut candidate = prefix.to_vec();
        if let Some(found) = scan(trie, &mut candidate, ranks, start_level, levels) {
            return Some(found);
        }
    }
    None
}

fn scan(
    trie: &OccupancyTrie,
    candidate: &mut Vec<usize>,
    ranks: &[Vec<usize>],
    level: usize,
    levels: usize,
) -> Option<Vec<usize>> {
    for &code in &ranks[level] {
        candidate.push(code);
        if !trie.subtree_full(candidate) {
            if level + 1 == levels {
                let found = candidate.clone();
                candidate.pop();
                return Some(found);
            }
            if let Some(found) = scan(trie, candidate, ranks, level + 1, levels) {
                candidate.pop();
                return Some(found);
            }
        }
        candidate.pop();
    }
    None
}

/// Token-sequence helpers for the serialized formats: `<a_2><b_3>` style.
pub fn split_token_run(s: &str) -> Result<Vec<String>, QuantLangError> {
    let mut tokens = Vec::new();
    let mut rest = s;
    while !rest.is_empty() {
        if !rest.starts_with('<') {
            return Err(QuantLangError::UnknownToken(rest.to_string()));
        }
        match rest.find('>') {
            Some(end) => {
                tokens.push(rest[..=end].to_string());
                rest = &rest[end + 1..];
            }
            None => return Err(QuantLangError::UnknownToken(rest.to_string())),
        }
    }
    Ok(tokens)
}

/// `<item_id>\t<modality>\t<token><token>...`, one line per (item, modality).
pub fn format_code_table(table: &ItemCodeTable, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for side in [&table.text, &table.image] {
        for (id, tuple) in &side.assignments {
            let tokens = vocab
                .tuple_to_tokens(side.modality, tuple)
                .expect("table tuples are in range");
            out.push_str(&format!("{id}\t{}\t{}\n", side.modality, tokens.join("")));
        }
    }
    out
}

pub fn parse_code_table(text: &str, vocab: &Vocabulary) -> Result<ItemCodeTable, QuantLangError> {
    let mut sides: HashMap<Modality, Vec<(ItemId, Vec<usize>)>> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (id, modality_s, run) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(QuantLangError::Parse {
                    line: line_no,
                    msg: "expected 3 tab-separated fields".into(),
                })
            }
        };
        let modality = Modality::parse(modality_s).ok_or_else(|| QuantLangError::Parse {
            line: line_no,
            msg: format!("unknown modality {modality_s:?}"),
        })?;
        let tokens = split_token_run(run)?;
        let (parsed_modality, tuple) = vocab.tokens_to_tuple(&tokens)?;
        if parsed_modality != modality {
            return Err(QuantLangError::Parse {
                line: line_no,
                msg: "token modality does not match the modality column".into(),
            });
        }
        sides
            .entry(modality)
            .or_default()
            .push((id.to_string(), tuple));
    }
    let text_table = ModalityCodeTable::from_assignments(
        Modality::Text,
        sides.remove(&Modality::Text).unwrap_or_default(),
        HashMap::new(),
    );
    let image_table = ModalityCodeTable::from_assignments(
        Modality::Image,
        sides.remove(&Modality::Image).unwrap_or_default(),
        HashMap::new(),
    );
    merge_modalities(text_table, image_table)
}

/// One token per line, in id order.
pub fn format_vocabulary(vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for id in 0..vocab.size() as u32 {
        out.push_str(vocab.id_to_token(id).expect("dense ids"));
        out.push('\n');
    }
    out
}

/// Reconstruct a vocabulary from its file form, validating the layout.
pub fn parse_vocabulary(text: &str) -> Result<Vocabulary, QuantLangError> {
    let tokens: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    // infer K from the run of <a_*> tokens and L from the count of distinct
    // lowercase prefixes, then rebuild and compare
    let k = tokens
        .iter()
        .filter(|t| t.starts_with("<a_"))
        .count();
    let code_tokens = tokens
        .iter()
        .filter(|t| Vocabulary::classify_token(t).is_some())
        .count();
    if k < 2 || code_tokens == 0 || code_tokens % (2 * k) != 0 {
        return Err(QuantLangError::Parse {
            line: 1,
            msg: "cannot infer (levels, codebook_size) from token list".into(),
        });
    }
    let levels = code_tokens / (2 * k);
    let prompt_tokens = tokens.iter().filter(|t| t.starts_with("<p_")).count();
    if prompt_tokens % PROMPT_TOKENS_PER_TASK != 0 {
        return Err(QuantLangError::Parse {
            line: 1,
            msg: "prompt token count is not a multiple of 4".into(),
        });
    }
    let vocab = build_vocabulary(levels, k, prompt_tokens / PROMPT_TOKENS_PER_TASK)?;
    let expected: Vec<&str> = (0..vocab.size() as u32)
        .map(|id| vocab.id_to_token(id).unwrap())
        .collect();
    if tokens != expected {
        return Err(QuantLangError::Parse {
            line: 1,
            msg: "token list does not match the canonical layout".into(),
        });
    }
    Ok(vocab)
}
