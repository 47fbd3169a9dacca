//! The quantitative translator: an MLP encoder, L-level residual
//! codebooks, and an MLP decoder, trained with reconstruction plus
//! residual-quantization losses.
//!
//! Quantization is greedy level by level: at level `i` the codeword is
//! the argmin of the squared distance between the running residual and
//! the level's codebook rows, ties broken by the smallest index.

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::ingest::{EmbeddingMatrix, ItemId, Modality};
use crate::optim::{AdamW, LrSchedule, xavier_uniform};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RqVaeConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub kmeans_init_iters: usize,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            levels: 4,
            codebook_size: 256,
            code_dim: 32,
            encoder_hidden: vec![128, 64],
            decoder_hidden: vec![64, 128],
            beta: 0.25,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 50,
            kmeans_init_iters: 10,
            seed: 0,
        }
    }
}

impl RqVaeConfig {
    /// Structural checks plus the K^L >= n_items capacity requirement.
    pub fn validate(&self, n_items: usize) -> Result<(), RqVaeError> {
        if self.levels < 1 {
            return Err(RqVaeError::InvalidConfig("levels must be >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(RqVaeError::InvalidConfig(
                "codebook_size must be >= 2".into(),
            ));
        }
        if self.beta < 0.0 {
            return Err(RqVaeError::InvalidConfig("beta must be >= 0".into()));
        }
        if self.code_dim == 0 {
            return Err(RqVaeError::InvalidConfig("code_dim must be positive".into()));
        }
        let capacity = (self.codebook_size as u128)
            .checked_pow(self.levels as u32)
            .unwrap_or(u128::MAX);
        if capacity < n_items as u128 {
            return Err(RqVaeError::CapacityExceeded {
                capacity,
                n_items,
            });
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RqVaeError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("codebook capacity K^L = {capacity} is below item count {n_items}")]
    CapacityExceeded { capacity: u128, n_items: usize },
    #[error("input dimension {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in loss term {term}")]
    NonFinite { term: &'static str },
    #[error("training diverged at epoch {epoch}; last good checkpoint retained")]
    Diverged {
        epoch: usize,
        last_good: Box<QuantTranslator>,
    },
}

/// Outcome of residual quantization for one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    /// Selected codeword per level, each in [0, K).
    pub code: Vec<usize>,
    /// Residuals r_1..r_L (r_1 is the latent itself).
    pub residuals: Vec<Vec<f64>>,
    /// Sum of the selected codewords.
    pub z_hat: Vec<f64>,
    /// Squared distances to every codeword at every level, L x K.
    pub level_distances: Vec<Vec<f64>>,
}

/// Greedy residual quantization of `z` against per-level codebooks.
pub fn quantize(codebooks: &[Array2<f64>], z: &[f64]) -> QuantizationResult {
    let dim = z.len();
    let mut residual: Vec<f64> = z.to_vec();
    let mut code = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len());
    let mut level_distances = Vec::with_capacity(codebooks.len());
    let mut z_hat = vec![0.0; dim];
    for cb in codebooks {
        debug_assert_eq!(cb.ncols(), dim);
        residuals.push(residual.clone());
        let mut dists = Vec::with_capacity(cb.nrows());
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, row) in cb.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(residual.iter())
                .map(|(v, r)| (r - v) * (r - v))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
            dists.push(d);
        }
        level_distances.push(dists);
        code.push(best);
        let chosen = cb.row(best);
        for j in 0..dim {
            residual[j] -= chosen[j];
            z_hat[j] += chosen[j];
        }
    }
    QuantizationResult {
        code,
        residuals,
        z_hat,
        level_distances,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub rq: f64,
    pub total: f64,
}

/// Trained encoder/codebooks/decoder for one modality.
#[derive(Debug, Clone)]
pub struct QuantTranslator {
    pub modality: Modality,
    pub config: RqVaeConfig,
    pub embedding_dim: usize,
    pub params: ParamSet,
    enc_layers: Vec<(usize, usize)>,
    dec_layers: Vec<(usize, usize)>,
    codebook_ids: Vec<usize>,
    pub train_log: Vec<EpochStats>,
}

/// Loss breakdown for one embedding vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub rq: f64,
    pub total: f64,
}

impl QuantTranslator {
    /// Random-init translator; codebooks start at zero until
    /// [`QuantTranslator::init_codebooks_from`] replaces them.
    pub fn init(modality: Modality, embedding_dim: usize, config: &RqVaeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut enc_layers = Vec::new();
        let mut widths = vec![embedding_dim];
        widths.extend(&config.encoder_hidden);
        widths.push(config.code_dim);
        for i in 0..widths.len() - 1 {
            let w = params.add(
                &format!("enc_w{i}"),
                xavier_uniform(&mut rng, widths[i], widths[i + 1]),
            );
            let b = params.add(&format!("enc_b{i}"), Array2::zeros((1, widths[i + 1])));
            enc_layers.push((w, b));
        }
        let mut dec_layers = Vec::new();
        let mut widths = vec![config.code_dim];
        widths.extend(&config.decoder_hidden);
        widths.push(embedding_dim);
        for i in 0..widths.len() - 1 {
            let w = params.add(
                &format!("dec_w{i}"),
                xavier_uniform(&mut rng, widths[i], widths[i + 1]),
            );
            let b = params.add(&format!("dec_b{i}"), Array2::zeros((1, widths[i + 1])));
            dec_layers.push((w, b));
        }
        let mut codebook_ids = Vec::new();
        for l in 0..config.levels {
            codebook_ids.push(params.add(
                &format!("codebook_l{l}"),
                Array2::zeros((config.codebook_size, config.code_dim)),
            ));
        }
        QuantTranslator {
            modality,
            config: config.clone(),
            embedding_dim,
            params,
            enc_layers,
            dec_layers,
            codebook_ids,
            train_log: Vec::new(),
        }
    }

    pub fn codebooks(&self) -> Vec<Array2<f64>> {
        self.codebook_ids
            .iter()
            .map(|&id| self.params.get(id).clone())
            .collect()
    }

    pub fn set_codebooks(&mut self, codebooks: Vec<Array2<f64>>) {
        assert_eq!(codebooks.len(), self.codebook_ids.len());
        for (&id, cb) in self.codebook_ids.iter().zip(codebooks) {
            assert_eq!(cb.nrows(), self.config.codebook_size);
            assert_eq!(cb.ncols(), self.config.code_dim);
            *self.params.get_mut(id) = cb;
        }
    }

    /// Raw (off-tape) MLP forward; ReLU between hidden layers, linear output.
    fn mlp_forward(&self, layers: &[(usize, usize)], x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = h.dot(self.params.get(w)) + self.params.get(b);
            if i + 1 < layers.len() {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    /// Encode a batch of embedding rows to latents.
    pub fn encode_batch(&self, h: &Array2<f64>) -> Result<Array2<f64>, RqVaeError> {
        if h.ncols() != self.embedding_dim {
            return Err(RqVaeError::DimensionMismatch {
                expected: self.embedding_dim,
                got: h.ncols(),
            });
        }
        Ok(self.mlp_forward(&self.enc_layers, h))
    }

    /// Encode a single embedding vector.
    pub fn encode(&self, h: ArrayView1<f64>) -> Result<Vec<f64>, RqVaeError> {
        let batch = h.insert_axis(Axis(0)).to_owned();
        let z = self.encode_batch(&batch)?;
        Ok(z.row(0).to_vec())
    }

    /// Decode a quantized latent back to embedding space.
    pub fn decode(&self, z_hat: ArrayView1<f64>) -> Result<Vec<f64>, RqVaeError> {
        if z_hat.len() != self.config.code_dim {
            return Err(RqVaeError::DimensionMismatch {
                expected: self.config.code_dim,
                got: z_hat.len(),
            });
        }
        let batch = z_hat.insert_axis(Axis(0)).to_owned();
        let out = self.mlp_forward(&self.dec_layers, &batch);
        Ok(out.row(0).to_vec())
    }

    pub fn quantize(&self, z: &[f64]) -> QuantizationResult {
        quantize(&self.codebooks(), z)
    }

    /// On-tape MLP forward used during training and gradient checks.
    fn mlp_forward_tape(&self, tape: &mut Tape, layers: &[(usize, usize)], x: NodeId) -> NodeId {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let wn = tape.param(&self.params, w);
            let bn = tape.param(&self.params, b);
            h = tape.matmul(h, wn);
            h = tape.add_row(h, bn);
            if i + 1 < layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Snapshot of everything the stop-gradient operator freezes: the code
    /// selections plus the raw values of every sg-protected operand,
    /// captured at the current parameters.
    pub fn quant_plan(&self, h: &Array2<f64>) -> QuantPlan {
        let z_raw = self.mlp_forward(&self.enc_layers, h);
        let codebooks = self.codebooks();
        let results: Vec<QuantizationResult> = z_raw
            .rows()
            .into_iter()
            .map(|r| quantize(&codebooks, r.as_slice().expect("contiguous row")))
            .collect();
        let levels = codebooks.len();
        let mut codes = Vec::with_capacity(levels);
        let mut frozen_residuals = Vec::with_capacity(levels);
        let mut frozen_selected = Vec::with_capacity(levels);
        let mut residual_raw = z_raw.clone();
        let mut z_hat_minus_z = -z_raw;
        for level in 0..levels {
            let level_codes: Vec<usize> = results.iter().map(|r| r.code[level]).collect();
            let mut selected = Array2::zeros(residual_raw.raw_dim());
            for (i, &c) in level_codes.iter().enumerate() {
                selected.row_mut(i).assign(&codebooks[level].row(c));
            }
            frozen_residuals.push(residual_raw.clone());
            residual_raw = &residual_raw - &selected;
            z_hat_minus_z += &selected;
            frozen_selected.push(selected);
            codes.push(level_codes);
        }
        QuantPlan {
            codes,
            frozen_residuals,
            frozen_selected,
            frozen_st: z_hat_minus_z,
        }
    }

    /// Record the loss on `tape` with the quantization plan held fixed.
    ///
    /// Returns (total, recon, rq) nodes; each is the SUM over the batch.
    /// The straight-through estimator feeds the decoder `z + sg[z_hat - z]`
    /// so decoder gradients copy through quantization into the encoder;
    /// residual recursion detaches selected codewords, so the commitment
    /// term's gradient reaches the encoder but never the codebooks.
    /// Holding the plan fixed while perturbing parameters makes the
    /// recorded forward a differentiable surrogate whose true gradient is
    /// exactly what `backward` computes (the finite-difference oracle
    /// relies on this).
    pub fn loss_tape_with_plan(
        &self,
        tape: &mut Tape,
        h: &Array2<f64>,
        plan: &QuantPlan,
        beta: f64,
    ) -> (NodeId, NodeId, NodeId) {
        let h_node = tape.constant(h.clone());
        let z_node = self.mlp_forward_tape(tape, &self.enc_layers, h_node);

        let mut rq_node: Option<NodeId> = None;
        let mut residual_node = z_node;
        for level in 0..self.codebook_ids.len() {
            let cb_node = tape.param(&self.params, self.codebook_ids[level]);
            let selected_node = tape.gather(cb_node, &plan.codes[level]);

            // ||sg[r_i] - v_{c_i}||^2: gradient flows to the codebook only
            let r_const = tape.constant(plan.frozen_residuals[level].clone());
            let d1 = tape.sub(r_const, selected_node);
            let term1 = tape.sum_squares(d1);
            // beta ||r_i - sg[v_{c_i}]||^2: gradient flows to the encoder only
            let v_const = tape.constant(plan.frozen_selected[level].clone());
            let d2 = tape.sub(residual_node, v_const);
            let ss2 = tape.sum_squares(d2);
            let term2 = tape.scale(ss2, beta);
            let level_sum = tape.add(term1, term2);
            rq_node = Some(match rq_node {
                Some(acc) => tape.add(acc, level_sum),
                None => level_sum,
            });

            // advance the residual with the codeword detached
            let v_const2 = tape.constant(plan.frozen_selected[level].clone());
            residual_node = tape.sub(residual_node, v_const2);
        }
        let rq_node = rq_node.expect("at least one level");

        // decoder input: z + sg[z_hat - z]
        let st_const = tape.constant(plan.frozen_st.clone());
        let dec_in = tape.add(z_node, st_const);
        let h_hat = self.mlp_forward_tape(tape, &self.dec_layers, dec_in);
        let diff = tape.sub(h_hat, h_node);
        let recon_node = tape.sum_squares(diff);

        let total = tape.add(recon_node, rq_node);
        debug_assert_eq!(tape.value(total).len(), 1);
        (total, recon_node, rq_node)
    }

    /// Record the full loss for a batch of embedding rows on `tape`,
    /// quantizing at the current parameters.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        h: &Array2<f64>,
        beta: f64,
    ) -> (NodeId, NodeId, NodeId) {
        let plan = self.quant_plan(h);
        self.loss_tape_with_plan(tape, h, &plan, beta)
    }

    /// Reconstruction, RQ, and total loss for a single embedding vector.
    pub fn compute_loss(&self, h: ArrayView1<f64>, beta: f64) -> Result<LossBreakdown, RqVaeError> {
        if h.len() != self.embedding_dim {
            return Err(RqVaeError::DimensionMismatch {
                expected: self.embedding_dim,
                got: h.len(),
            });
        }
        let batch = h.insert_axis(Axis(0)).to_owned();
        let mut tape = Tape::new();
        let (total, recon, rq) = self.loss_tape(&mut tape, &batch, beta);
        let recon = tape.scalar(recon);
        let rq = tape.scalar(rq);
        let total = tape.scalar(total);
        if !recon.is_finite() {
            return Err(RqVaeError::NonFinite { term: "recon" });
        }
        if !rq.is_finite() {
            return Err(RqVaeError::NonFinite { term: "rq" });
        }
        if !total.is_finite() {
            return Err(RqVaeError::NonFinite { term: "total" });
        }
        Ok(LossBreakdown { recon, rq, total })
    }

    /// Replace zero codebooks with k-means initializations computed from
    /// the latents of `embeddings`.
    pub fn init_codebooks_from(&mut self, embeddings: &Array2<f64>) -> Result<Vec<String>, RqVaeError> {
        let z = self.encode_batch(embeddings)?;
        let (cbs, warnings) = init_codebooks(&z, &self.config);
        self.set_codebooks(cbs);
        Ok(warnings)
    }

    /// Quantize every row of an embedding matrix; deterministic.
    pub fn quantize_all(
        &self,
        embeddings: &EmbeddingMatrix,
    ) -> Result<(Vec<(ItemId, QuantizationResult)>, UsageStats), RqVaeError> {
        let z = self.encode_batch(&embeddings.vectors)?;
        let codebooks = self.codebooks();
        let mut out = Vec::with_capacity(embeddings.len());
        let mut per_level = vec![vec![0usize; self.config.codebook_size]; self.config.levels];
        let mut tuple_counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for (id, row) in embeddings.item_ids.iter().zip(z.rows()) {
            let q = quantize(&codebooks, row.as_slice().expect("contiguous row"));
            for (l, &c) in q.code.iter().enumerate() {
                per_level[l][c] += 1;
            }
            *tuple_counts.entry(q.code.clone()).or_insert(0) += 1;
            out.push((id.clone(), q));
        }
        let colliding_tuples = tuple_counts.values().filter(|&&c| c > 1).count();
        let colliding_items = tuple_counts
            .values()
            .filter(|&&c| c > 1)
            .sum::<usize>();
        Ok((
            out,
            UsageStats {
                per_level_counts: per_level,
                colliding_tuples,
                colliding_items,
            },
        ))
    }
}

/// Frozen stop-gradient operands and code selections for one batch.
#[derive(Debug, Clone)]
pub struct QuantPlan {
    pub codes: Vec<Vec<usize>>,
    frozen_residuals: Vec<Array2<f64>>,
    frozen_selected: Vec<Array2<f64>>,
    frozen_st: Array2<f64>,
}

/// Per-level code frequencies plus collision counts from `quantize_all`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsageStats {
    pub per_level_counts: Vec<Vec<usize>>,
    pub colliding_tuples: usize,
    pub colliding_items: usize,
}

impl UsageStats {
    /// Number of distinct codes in use at `level`.
    pub fn used_codes(&self, level: usize) -> usize {
        self.per_level_counts[level].iter().filter(|&&c| c > 0).count()
    }
}

/// K-means++ seeding plus Lloyd iterations, one codebook per level, each
/// level fit on the residuals of the previous one. Rows are canonicalized
/// (sorted lexicographically) first so the result is invariant to the
/// input row order.
pub fn init_codebooks(z_batch: &Array2<f64>, config: &RqVaeConfig) -> (Vec<Array2<f64>>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut rows: Vec<Vec<f64>> = z_batch.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

    let mut codebooks = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        let seed = config.seed.wrapping_add(level as u64 + 1);
        let (centroids, warn) = kmeans(
            &rows,
            config.codebook_size,
            config.kmeans_init_iters,
            seed,
        );
        if let Some(w) = warn {
            warnings.push(format!("level {level}: {w}"));
        }
        // advance residuals for the next level
        for row in rows.iter_mut() {
            let (best, _) = nearest(&centroids, row);
            for (j, v) in row.iter_mut().enumerate() {
                *v -= centroids[best][j];
            }
        }
        let dim = config.code_dim;
        let mut cb = Array2::zeros((config.codebook_size, dim));
        for (k, c) in centroids.iter().enumerate() {
            for j in 0..dim {
                cb[[k, j]] = c[j];
            }
        }
        codebooks.push(cb);
    }
    (codebooks, warnings)
}

fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d: f64 = c.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Option<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.contains(p) {
            distinct.push(p.clone());
        }
    }
    let mut warning = None;
    let mut work: Vec<Vec<f64>> = points.to_vec();
    if distinct.len() < k {
        // pad with perturbed duplicates so k-means++ can seed k centers
        warning = Some(format!(
            "only {} distinct points for {} centers; padding with perturbed duplicates",
            distinct.len(),
            k
        ));
        let dim = points[0].len();
        while work.len() < k || distinct.len() < k {
            let base = distinct[rng.gen_range(0..distinct.len())].clone();
            let perturbed: Vec<f64> = (0..dim)
                .map(|j| base[j] + rng.gen_range(-1e-4..1e-4))
                .collect();
            distinct.push(perturbed.clone());
            work.push(perturbed);
        }
    }

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(work[rng.gen_range(0..work.len())].clone());
    let mut d2: Vec<f64> = work
        .iter()
        .map(|p| nearest(&centroids, p).1)
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all points already covered; take any point not yet a centroid
            work.iter()
                .find(|p| !centroids.contains(p))
                .cloned()
                .unwrap_or_else(|| work[rng.gen_range(0..work.len())].clone())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = work.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            work[chosen].clone()
        };
        centroids.push(next);
        for (i, p) in work.iter().enumerate() {
            let d = nearest(&[centroids.last().unwrap().clone()], p).1;
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    // Lloyd iterations
    let dim = work[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in &work {
            let (best, _) = nearest(&centroids, p);
            counts[best] += 1;
            for j in 0..dim {
                sums[best][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
            // empty clusters keep their previous centroid
        }
    }
    (centroids, warning)
}

/// Train a translator on an embedding matrix with AdamW; returns the
/// translator with its per-epoch loss log.
pub fn train_translator(
    embeddings: &EmbeddingMatrix,
    config: &RqVaeConfig,
) -> Result<QuantTranslator, RqVaeError> {
    config.validate(embeddings.len())?;
    let mut translator = QuantTranslator::init(embeddings.modality, embeddings.dim(), config);
    translator.init_codebooks_from(&embeddings.vectors)?;
    if config.epochs == 0 {
        return Ok(translator);
    }

    let n = embeddings.len();
    let mut opt = AdamW::new(&translator.params, 0.0);
    let sched = LrSchedule::Constant {
        lr: config.learning_rate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_recon = 0.0;
        let mut epoch_rq = 0.0;
        let mut n_batches = 0.0;
        let last_good = translator.clone();
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch = gather_rows(&embeddings.vectors, chunk);
            let mut tape = Tape::new();
            let (total, recon, rq) = translator.loss_tape(&mut tape, &batch, config.beta);
            let m = chunk.len() as f64;
            let mean_total = tape.scale(total, 1.0 / m);
            let loss_val = tape.scalar(mean_total);
            if !loss_val.is_finite() {
                return Err(RqVaeError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            epoch_recon += tape.scalar(recon) / m;
            epoch_rq += tape.scalar(rq) / m;
            n_batches += 1.0;
            let mut grads = translator.params.zero_grads();
            tape.backward(mean_total, &mut grads, 1.0);
            opt.step(&mut translator.params, &grads, sched.lr_at(step));
            step += 1;
        }
        translator.train_log.push(EpochStats {
            epoch,
            recon: epoch_recon / n_batches,
            rq: epoch_rq / n_batches,
            total: (epoch_recon + epoch_rq) / n_batches,
        });
    }
    Ok(translator)
}

fn gather_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}

/// Convenience: row view as Array1 (used by tests and callers).
pub fn row1(v: &[f64]) -> Array1<f64> {
    Array1::from_vec(v.to_vec())
}

impl QuantTranslator {
    /// Self-describing checkpoint: config echo, every weight tensor
    /// (including codebooks, which live in the parameter set), and the
    /// per-epoch training log.
    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint {
        let mut ckpt = crate::checkpoint::Checkpoint::new(
            "translator",
            serde_json::json!({
                "modality": self.modality,
                "embedding_dim": self.embedding_dim,
                "rqvae": self.config,
            }),
        );
        ckpt.metadata = serde_json::json!({ "train_log": self.train_log });
        ckpt.push_params(&self.params);
        ckpt
    }

    pub fn from_checkpoint(
        ckpt: &crate::checkpoint::Checkpoint,
    ) -> Result<Self, crate::checkpoint::CheckpointError> {
        use crate::checkpoint::CheckpointError;
        ckpt.expect_kind("translator")?;
        let bad = |e: String| CheckpointError::Corrupt(format!("bad translator header: {e}"));
        let modality: Modality = serde_json::from_value(ckpt.config["modality"].clone())
            .map_err(|e| bad(e.to_string()))?;
        let embedding_dim: usize = serde_json::from_value(ckpt.config["embedding_dim"].clone())
            .map_err(|e| bad(e.to_string()))?;
        let config: RqVaeConfig = serde_json::from_value(ckpt.config["rqvae"].clone())
            .map_err(|e| bad(e.to_string()))?;
        let mut translator = QuantTranslator::init(modality, embedding_dim, &config);
        ckpt.restore_params(&mut translator.params)?;
        if let Ok(log) = serde_json::from_value(ckpt.metadata["train_log"].clone()) {
            translator.train_log = log;
        }
        Ok(translator)
    }
}
