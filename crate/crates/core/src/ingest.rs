//! Item embeddings, user interaction sequences, and the synthetic
//! desk-scale dataset generator.
//!
//! Embedding files are the system boundary: per-item text/image vectors
//! are ingested from disk rather than produced by modal encoders.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

pub type ItemId = String;
pub type UserId = String;

/// Default per-user history cap, counted in items.
pub const MAX_SEQUENCE_LEN: usize = 20;
/// Users with fewer interactions than this are dropped at load.
pub const MIN_INTERACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "text" => Some(Modality::Text),
            "image" => Some(Modality::Image),
            _ => None,
        }
    }

    pub fn other(&self) -> Modality {
        match self {
            Modality::Text => Modality::Image,
            Modality::Image => Modality::Text,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-modality item representations: one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub modality: Modality,
    pub item_ids: Vec<ItemId>,
    pub vectors: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn id_set(&self) -> HashSet<&str> {
        self.item_ids.iter().map(|s| s.as_str()).collect()
    }
}

/// Chronologically ordered interaction sequences, one per user.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub users: Vec<(UserId, Vec<ItemId>)>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Distinct items referenced anywhere in the dataset.
    pub fn item_set(&self) -> HashSet<&str> {
        self.users
            .iter()
            .flat_map(|(_, items)| items.iter().map(|s| s.as_str()))
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed header: {msg}")]
    MalformedHeader { line: usize, msg: String },
    #[error("line {line}: expected {expected} values, got {got}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: duplicate item id {id:?}")]
    DuplicateItem { id: ItemId, line: usize },
    #[error("line {line}: non-finite value in vector")]
    NonFinite { line: usize },
    #[error("line {line}: unrecognized line format")]
    UnknownFormat { line: usize },
    #[error("line {line}: empty item list for user {user:?}")]
    EmptyItems { user: UserId, line: usize },
    #[error("item {item:?} (user {user:?}) has no embedding in the {modality} matrix")]
    MissingEmbedding {
        item: ItemId,
        user: UserId,
        modality: Modality,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Parse the text embedding format:
/// header `#emb <modality> <count> <dim>`, then `<item_id>\t<f1> <f2> ...`.
pub fn parse_embeddings(text: &str, modality: Modality) -> Result<EmbeddingMatrix, IngestError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| IngestError::MalformedHeader {
            line: 1,
            msg: "empty file".into(),
        })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "#emb" {
        return Err(IngestError::MalformedHeader {
            line: 1,
            msg: format!("expected `#emb <modality> <count> <dim>`, got {header:?}"),
        });
    }
    let header_modality = Modality::parse(parts[1]).ok_or_else(|| IngestError::MalformedHeader {
        line: 1,
        msg: format!("unknown modality {:?}", parts[1]),
    })?;
    if header_modality != modality {
        return Err(IngestError::MalformedHeader {
            line: 1,
            msg: format!("file holds {header_modality} embeddings, expected {modality}"),
        });
    }
    let count: usize = parts[2].parse().map_err(|_| IngestError::MalformedHeader {
        line: 1,
        msg: format!("bad count {:?}", parts[2]),
    })?;
    let dim: usize = parts[3].parse().map_err(|_| IngestError::MalformedHeader {
        line: 1,
        msg: format!("bad dim {:?}", parts[3]),
    })?;

    let mut item_ids = Vec::with_capacity(count);
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut data = Vec::with_capacity(count * dim);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or(IngestError::UnknownFormat { line: line_no })?;
        if seen.insert(id.to_string(), line_no).is_some() {
            return Err(IngestError::DuplicateItem {
                id: id.to_string(),
                line: line_no,
            });
        }
        let mut got = 0;
        for tok in rest.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| IngestError::UnknownFormat { line: line_no })?;
            if !v.is_finite() {
                return Err(IngestError::NonFinite { line: line_no });
            }
            data.push(v);
            got += 1;
        }
        if got != dim {
            return Err(IngestError::DimensionMismatch {
                line: line_no,
                expected: dim,
                got,
            });
        }
        item_ids.push(id.to_string());
    }
    if item_ids.len() != count {
        return Err(IngestError::MalformedHeader {
            line: 1,
            msg: format!("header declares {count} items, file has {}", item_ids.len()),
        });
    }
    let vectors = Array2::from_shape_vec((item_ids.len(), dim), data)
        .expect("row-major reshape cannot fail after per-line dim checks");
    Ok(EmbeddingMatrix {
        modality,
        item_ids,
        vectors,
    })
}

pub fn load_embeddings(path: &Path, modality: Modality) -> Result<EmbeddingMatrix, IngestError> {
    let text = std::fs::read_to_string(path)?;
    parse_embeddings(&text, modality)
}

pub fn format_embeddings(m: &EmbeddingMatrix) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "#emb {} {} {}\n",
        m.modality,
        m.len(),
        m.dim()
    ));
    for (id, row) in m.item_ids.iter().zip(m.vectors.rows()) {
        out.push_str(id);
        out.push('\t');
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            // `{}` on f64 prints the shortest round-tripping decimal
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), IngestError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format_embeddings(m).as_bytes())?;
    Ok(())
}

/// Options for interaction loading; defaults follow the preprocessing
/// conventions (min 5 interactions, history capped at the most recent 20).
#[derive(Debug, Clone, Copy)]
pub struct InteractionLoadOptions {
    pub min_interactions: usize,
    pub max_len: usize,
}

impl Default for InteractionLoadOptions {
    fn default() -> Self {
        InteractionLoadOptions {
            min_interactions: MIN_INTERACTIONS,
            max_len: MAX_SEQUENCE_LEN,
        }
    }
}

/// Interactions plus warnings for users dropped by the minimum-length filter.
#[derive(Debug, Clone)]
pub struct LoadedInteractions {
    pub dataset: InteractionDataset,
    pub dropped_users: Vec<UserId>,
}

/// Parse `"<user_id>\t<item1>,<item2>,..."` lines. Sequences shorter than
/// `min_interactions` are dropped (reported, not fatal); longer sequences
/// keep their most recent `max_len` items.
pub fn parse_interactions(
    text: &str,
    opts: InteractionLoadOptions,
) -> Result<LoadedInteractions, IngestError> {
    let mut users = Vec::new();
    let mut dropped = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (user, rest) = line
            .split_once('\t')
            .ok_or(IngestError::UnknownFormat { line: line_no })?;
        let items: Vec<ItemId> = rest
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect();
        if items.is_empty() {
            return Err(IngestError::EmptyItems {
                user: user.to_string(),
                line: line_no,
            });
        }
        if items.len() < opts.min_interactions {
            dropped.push(user.to_string());
            continue;
        }
        let start = items.len().saturating_sub(opts.max_len);
        users.push((user.to_string(), items[start..].to_vec()));
    }
    Ok(LoadedInteractions {
        dataset: InteractionDataset { users },
        dropped_users: dropped,
    })
}

pub fn load_interactions(
    path: &Path,
    opts: InteractionLoadOptions,
) -> Result<LoadedInteractions, IngestError> {
    let text = std::fs::read_to_string(path)?;
    parse_interactions(&text, opts)
}

pub fn format_interactions(d: &InteractionDataset) -> String {
    let mut out = String::new();
    for (user, items) in &d.users {
        out.push_str(user);
        out.push('\t');
        out.push_str(&items.join(","));
        out.push('\n');
    }
    out
}

pub fn write_interactions(path: &Path, d: &InteractionDataset) -> Result<(), IngestError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format_interactions(d).as_bytes())?;
    Ok(())
}

/// Every interaction item must carry an embedding in both modalities;
/// missing items are a hard error, never a silent drop.
pub fn validate_coverage(
    dataset: &InteractionDataset,
    text: &EmbeddingMatrix,
    image: &EmbeddingMatrix,
) -> Result<(), IngestError> {
    let text_ids = text.id_set();
    let image_ids = image.id_set();
    for (user, items) in &dataset.users {
        for item in items {
            if !text_ids.contains(item.as_str()) {
                return Err(IngestError::MissingEmbedding {
                    item: item.clone(),
                    user: user.clone(),
                    modality: Modality::Text,
                });
            }
            if !image_ids.contains(item.as_str()) {
                return Err(IngestError::MissingEmbedding {
                    item: item.clone(),
                    user: user.clone(),
                    modality: Modality::Image,
                });
            }
        }
    }
    Ok(())
}

/// Configuration for the synthetic generator. Text embeddings come from
/// `n_clusters` Gaussian-style clusters; an item's image cluster equals its
/// text cluster with probability `cross_modal_correlation`, otherwise it is
/// drawn uniformly at random. User sequences are cluster-biased walks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub cross_modal_correlation: f64,
    pub seed: u64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    /// Per-coordinate noise amplitude around cluster centers.
    pub noise: f64,
    /// Probability of staying in the current cluster at each walk step.
    pub stay_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 200,
            n_users: 100,
            dim: 16,
            n_clusters: 4,
            cross_modal_correlation: 0.9,
            seed: 0,
            min_seq_len: 5,
            max_seq_len: 12,
            noise: 0.15,
            stay_prob: 0.85,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub text: EmbeddingMatrix,
    pub image: EmbeddingMatrix,
    pub interactions: InteractionDataset,
    pub text_labels: Vec<usize>,
    pub image_labels: Vec<usize>,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData, IngestError> {
    if config.n_clusters == 0 || config.n_clusters > config.n_items {
        return Err(IngestError::InvalidConfig(format!(
            "n_clusters {} must be in [1, n_items={}]",
            config.n_clusters, config.n_items
        )));
    }
    if !(0.0..=1.0).contains(&config.cross_modal_correlation) {
        return Err(IngestError::InvalidConfig(format!(
            "cross_modal_correlation {} must lie in [0,1]",
            config.cross_modal_correlation
        )));
    }
    if config.min_seq_len < 2 || config.max_seq_len < config.min_seq_len {
        return Err(IngestError::InvalidConfig(
            "need 2 <= min_seq_len <= max_seq_len".into(),
        ));
    }
    if config.dim == 0 {
        return Err(IngestError::InvalidConfig("dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let sample_centers = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..config.n_clusters)
            .map(|_| (0..config.dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect()
    };
    let text_centers = sample_centers(&mut rng);
    let image_centers = sample_centers(&mut rng);

    let text_labels: Vec<usize> = (0..config.n_items)
        .map(|_| rng.gen_range(0..config.n_clusters))
        .collect();
    let image_labels: Vec<usize> = text_labels
        .iter()
        .map(|&l| {
            if rng.gen_bool(config.cross_modal_correlation) {
                l
            } else {
                rng.gen_range(0..config.n_clusters)
            }
        })
        .collect();

    let item_ids: Vec<ItemId> = (0..config.n_items).map(|i| format!("item_{i:05}")).collect();

    let emit = |labels: &[usize], centers: &[Vec<f64>], rng: &mut ChaCha8Rng| {
        let mut m = Array2::zeros((config.n_items, config.dim));
        for (i, &label) in labels.iter().enumerate() {
            for j in 0..config.dim {
                m[[i, j]] = centers[label][j] + rng.gen_range(-config.noise..config.noise);
            }
        }
        m
    };
    let text_vectors = emit(&text_labels, &text_centers, &mut rng);
    let image_vectors = emit(&image_labels, &image_centers, &mut rng);

    // Items per image cluster, for the walk. Behavior follows the image
    // labels so that neither modality is redundant: the image history
    // carries the behavioral signal exactly, while the text history is a
    // rho-noisy view of it — cross-modal tasks therefore add information
    // that same-modality history alone does not.
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); config.n_clusters];
    for (i, &l) in image_labels.iter().enumerate() {
        cluster_items[l].push(i);
    }

    let mut users = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let len = rng.gen_range(config.min_seq_len..=config.max_seq_len);
        let mut used: HashSet<usize> = HashSet::new();
        let mut seq = Vec::with_capacity(len);
        let mut cluster = rng.gen_range(0..config.n_clusters);
        while seq.len() < len {
            if !rng.gen_bool(config.stay_prob) {
                cluster = rng.gen_range(0..config.n_clusters);
            }
            // sample an unused item from the cluster; fall back to any cluster
            // with free items so walks never repeat an item within a user
            let pick = pick_unused(&cluster_items[cluster], &used, &mut rng).or_else(|| {
                (0..config.n_clusters)
                    .map(|c| (cluster + c) % config.n_clusters)
                    .find_map(|c| pick_unused(&cluster_items[c], &used, &mut rng))
            });
            match pick {
                Some(i) => {
                    used.insert(i);
                    seq.push(item_ids[i].clone());
                }
                None => break, // fewer items than requested length
            }
        }
        users.push((format!("user_{u:05}"), seq));
    }

    Ok(SyntheticData {
        text: EmbeddingMatrix {
            modality: Modality::Text,
            item_ids: item_ids.clone(),
            vectors: text_vectors,
        },
        image: EmbeddingMatrix {
            modality: Modality::Image,
            item_ids,
            vectors: image_vectors,
        },
        interactions: InteractionDataset { users },
        text_labels,
        image_labels,
    })
}

fn pick_unused(pool: &[usize], used: &HashSet<usize>, rng: &mut ChaCha8Rng) -> Option<usize> {
    let free: Vec<usize> = pool.iter().copied().filter(|i| !used.contains(i)).collect();
    if free.is_empty() {
        None
    } else {
        Some(free[rng.gen_range(0..free.len())])
    }
}
