//! Encoder-decoder transformer over the quantitative language, trained
//! with the mean negative log-likelihood of the target tokens.
//!
//! Pre-norm residual blocks, learned absolute position embeddings, ReLU
//! feed-forward, multi-head attention with padding and causal masks.
//! Two configurations ship: the paper-scale profile and a desk profile
//! small enough for CPU test runs.

use crate::autodiff::{NodeId, ParamId, ParamSet, Tape};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{SplitDataset, Stage, TaskExample};
use crate::optim::{embedding_init, xavier_uniform, AdamW, LrSchedule};
use crate::quantlang::{BOS_ID, PAD_ID};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Additive mask value for disallowed attention edges.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, thiserror::Error)]
pub enum Seq2SeqError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab of {vocab}")]
    OutOfRangeId { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("task {0} is not part of the {1} stage")]
    IncompatibleTask(&'static str, &'static str),
    #[error("loss became non-finite at step {step}; last good weights attached")]
    Diverged { step: u64, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Tie the output projection to the embedding table (transposed).
    pub tied_output: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Paper-scale profile.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 4,
            heads: 6,
            head_dim: 64,
            ffn_dim: 1024,
            model_dim: 128,
            vocab_size,
            max_positions: 128,
            dropout: 0.1,
            tied_output: false,
            seed: 0,
        }
    }

    /// Desk-scale profile for CPU runs.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            model_dim: 64,
            vocab_size,
            max_positions: 96,
            dropout: 0.1,
            tied_output: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), Seq2SeqError> {
        for (name, v) in [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("model_dim", self.model_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Seq2SeqError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Seq2SeqError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    attn: AttnParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    self_attn: AttnParams,
    cross_attn: AttnParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    embed: ParamId,
    pos_enc: ParamId,
    pos_dec: ParamId,
    out_proj: Option<ParamId>,
    enc_layers: Vec<EncLayer>,
    dec_layers: Vec<DecLayer>,
}

impl Seq2SeqModel {
    pub fn init(config: ModelConfig) -> Result<Self, Seq2SeqError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let d = config.model_dim;
        let attn_dim = config.heads * config.head_dim;

        let embed = params.add(
            "embed",
            embedding_init(&mut rng, config.vocab_size, d, 0.02),
        );
        let pos_enc = params.add(
            "enc.pos",
            embedding_init(&mut rng, config.max_positions, d, 0.02),
        );
        let pos_dec = params.add(
            "dec.pos",
            embedding_init(&mut rng, config.max_positions, d, 0.02),
        );

        let add_attn = |params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str| AttnParams {
            wq: params.add(&format!("{prefix}.wq"), xavier_uniform(rng, d, attn_dim)),
            wk: params.add(&format!("{prefix}.wk"), xavier_uniform(rng, d, attn_dim)),
            wv: params.add(&format!("{prefix}.wv"), xavier_uniform(rng, d, attn_dim)),
            wo: params.add(&format!("{prefix}.wo"), xavier_uniform(rng, attn_dim, d)),
        };
        let add_ffn = |params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str| FfnParams {
            w1: params.add(&format!("{prefix}.w1"), xavier_uniform(rng, d, config.ffn_dim)),
            b1: params.add(&format!("{prefix}.b1"), Array2::zeros((1, config.ffn_dim))),
            w2: params.add(&format!("{prefix}.w2"), xavier_uniform(rng, config.ffn_dim, d)),
            b2: params.add(&format!("{prefix}.b2"), Array2::zeros((1, d))),
        };

        let enc_layers: Vec<EncLayer> = (0..config.enc_layers)
            .map(|l| EncLayer {
                attn: add_attn(&mut params, &mut rng, &format!("enc.{l}.attn")),
                ffn: add_ffn(&mut params, &mut rng, &format!("enc.{l}.ffn")),
            })
            .collect();
        let dec_layers: Vec<DecLayer> = (0..config.dec_layers)
            .map(|l| DecLayer {
                self_attn: add_attn(&mut params, &mut rng, &format!("dec.{l}.self")),
                cross_attn: add_attn(&mut params, &mut rng, &format!("dec.{l}.cross")),
                ffn: add_ffn(&mut params, &mut rng, &format!("dec.{l}.ffn")),
            })
            .collect();
        let out_proj = if config.tied_output {
            None
        } else {
            Some(params.add("out_proj", xavier_uniform(&mut rng, d, config.vocab_size)))
        };

        Ok(Seq2SeqModel {
            config,
            params,
            embed,
            pos_enc,
            pos_dec,
            out_proj,
            enc_layers,
            dec_layers,
        })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), Seq2SeqError> {
        if ids.is_empty() {
            return Err(Seq2SeqError::EmptySequence);
        }
        if ids.len() > self.config.max_positions {
            return Err(Seq2SeqError::TooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Seq2SeqError::OutOfRangeId {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed_seq(&self, tape: &mut Tape, ids: &[u32], pos_table: ParamId) -> NodeId {
        let indices: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(&self.params, self.embed);
        let emb = tape.gather(table, &indices);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos_param = tape.param(&self.params, pos_table);
        let pos = tape.gather(pos_param, &positions);
        tape.add(emb, pos)
    }

    /// Inverted dropout on a sublayer output; identity in eval mode.
    fn dropout(&self, tape: &mut Tape, x: NodeId, rng: &mut Option<&mut ChaCha8Rng>) -> NodeId {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let (r, c) = tape.value(x).dim();
                let keep = 1.0 - p;
                let mask =
                    Array2::from_shape_fn((r, c), |_| {
                        if rng.gen_bool(keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
            _ => x,
        }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        x_q: NodeId,
        x_kv: NodeId,
        p: &AttnParams,
        mask: &Array2<f64>,
    ) -> NodeId {
        let wq = tape.param(&self.params, p.wq);
        let wk = tape.param(&self.params, p.wk);
        let wv = tape.param(&self.params, p.wv);
        let q = tape.matmul(x_q, wq);
        let k = tape.matmul(x_kv, wk);
        let v = tape.matmul(x_kv, wv);
        let mask_node = tape.constant(mask.clone());
        let dh = self.config.head_dim;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = tape.add(scaled, mask_node);
            let attn = tape.softmax_rows(masked);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&heads);
        let wo = tape.param(&self.params, p.wo);
        tape.matmul(cat, wo)
    }

    fn ffn(&self, tape: &mut Tape, x: NodeId, p: &FfnParams) -> NodeId {
        let w1 = tape.param(&self.params, p.w1);
        let b1 = tape.param(&self.params, p.b1);
        let w2 = tape.param(&self.params, p.w2);
        let b2 = tape.param(&self.params, p.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    /// Mask where key positions holding PAD are unreachable.
    fn pad_mask(query_len: usize, key_ids: &[u32]) -> Array2<f64> {
        Array2::from_shape_fn((query_len, key_ids.len()), |(_, j)| {
            if key_ids[j] == PAD_ID {
                MASK_NEG
            } else {
                0.0
            }
        })
    }

    /// Causal mask combined with a PAD key mask.
    fn causal_pad_mask(ids: &[u32]) -> Array2<f64> {
        let n = ids.len();
        Array2::from_shape_fn((n, n), |(i, j)| {
            if j > i || ids[j] == PAD_ID {
                MASK_NEG
            } else {
                0.0
            }
        })
    }

    /// Encoder stack; returns the (len x model_dim) representation node.
    pub fn encode(
        &self,
        tape: &mut Tape,
        input_ids: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, Seq2SeqError> {
        self.check_ids(input_ids)?;
        let mask = Self::pad_mask(input_ids.len(), input_ids);
        let mut x = self.embed_seq(tape, input_ids, self.pos_enc);
        x = self.dropout(tape, x, rng);
        for layer in &self.enc_layers {
            let h = tape.layer_norm_rows(x);
            let a = self.attention(tape, h, h, &layer.attn, &mask);
            let a = self.dropout(tape, a, rng);
            x = tape.add(x, a);
            let h = tape.layer_norm_rows(x);
            let f = self.ffn(tape, h, &layer.ffn);
            let f = self.dropout(tape, f, rng);
            x = tape.add(x, f);
        }
        Ok(tape.layer_norm_rows(x))
    }

    /// Decoder stack over `decoder_input` attending to `enc_out`;
    /// returns (target_len x vocab_size) logits.
    pub fn decode(
        &self,
        tape: &mut Tape,
        enc_out: NodeId,
        input_ids: &[u32],
        decoder_input: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, Seq2SeqError> {
        self.check_ids(decoder_input)?;
        let self_mask = Self::causal_pad_mask(decoder_input);
        let cross_mask = Self::pad_mask(decoder_input.len(), input_ids);
        let mut y = self.embed_seq(tape, decoder_input, self.pos_dec);
        y = self.dropout(tape, y, rng);
        for layer in &self.dec_layers {
            let h = tape.layer_norm_rows(y);
            let a = self.attention(tape, h, h, &layer.self_attn, &self_mask);
            let a = self.dropout(tape, a, rng);
            y = tape.add(y, a);
            let h = tape.layer_norm_rows(y);
            let c = self.attention(tape, h, enc_out, &layer.cross_attn, &cross_mask);
            let c = self.dropout(tape, c, rng);
            y = tape.add(y, c);
            let h = tape.layer_norm_rows(y);
            let f = self.ffn(tape, h, &layer.ffn);
            let f = self.dropout(tape, f, rng);
            y = tape.add(y, f);
        }
        let y = tape.layer_norm_rows(y);
        let logits = match self.out_proj {
            Some(w) => {
                let w = tape.param(&self.params, w);
                tape.matmul(y, w)
            }
            None => {
                let e = tape.param(&self.params, self.embed);
                let et = tape.transpose(e);
                tape.matmul(y, et)
            }
        };
        Ok(logits)
    }

    /// Full forward pass; deterministic in eval mode (`rng = None`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        input_ids: &[u32],
        decoder_input: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, Seq2SeqError> {
        let enc = self.encode(tape, input_ids, rng)?;
        self.decode(tape, enc, input_ids, decoder_input, rng)
    }

    /// Eval-mode logits as a plain matrix.
    pub fn eval_logits(
        &self,
        input_ids: &[u32],
        decoder_input: &[u32],
    ) -> Result<Array2<f64>, Seq2SeqError> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, input_ids, decoder_input, &mut None)?;
        Ok(tape.value(logits).clone())
    }

    /// Teacher-forcing decoder input for an example: BOS ++ target[..-1].
    pub fn decoder_input_for(target_ids: &[u32]) -> Vec<u32> {
        let mut d = Vec::with_capacity(target_ids.len());
        d.push(BOS_ID);
        d.extend_from_slice(&target_ids[..target_ids.len() - 1]);
        d
    }

    /// Mean NLL over all non-PAD target positions of a batch, as a tape
    /// node (1x1). Each example contributes its counted positions to a
    /// single global mean.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        batch: &[&TaskExample],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, Seq2SeqError> {
        assert!(!batch.is_empty(), "empty batch");
        let counts: Vec<usize> = batch
            .iter()
            .map(|e| e.target_ids.iter().filter(|&&t| t != PAD_ID).count())
            .collect();
        let total: usize = counts.iter().sum();
        assert!(total > 0, "all-PAD batch");
        let mut acc: Option<NodeId> = None;
        for (example, &count) in batch.iter().zip(&counts) {
            if count == 0 {
                continue;
            }
            let dec_in = Self::decoder_input_for(&example.target_ids);
            let logits = self.forward(tape, &example.input_ids, &dec_in, rng)?;
            let targets: Vec<usize> = example.target_ids.iter().map(|&t| t as usize).collect();
            let counted: Vec<bool> = example.target_ids.iter().map(|&t| t != PAD_ID).collect();
            let ce = tape.mean_cross_entropy(logits, &targets, &counted);
            let weighted = tape.scale(ce, count as f64 / total as f64);
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted),
                None => weighted,
            });
        }
        Ok(acc.expect("non-empty batch"))
    }

    /// Eval-mode mean NLL of one example.
    pub fn nll_loss(&self, example: &TaskExample) -> Result<f64, Seq2SeqError> {
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, &[example], &mut None)?;
        Ok(tape.scalar(loss))
    }

    pub fn to_checkpoint(&self, stage: Option<&str>, metadata: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint::new(
            "seq2seq",
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        ckpt.stage = stage.map(str::to_string);
        ckpt.metadata = metadata;
        ckpt.push_params(&self.params);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, Seq2SeqError> {
        ckpt.expect_kind("seq2seq")?;
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Seq2SeqError::InvalidConfig(format!("bad config in checkpoint: {e}")))?;
        let mut model = Self::init(config)?;
        ckpt.restore_params(&mut model.params)?;
        Ok(model)
    }
}

/// Stage-specific optimization recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    /// Decoupled AdamW weight decay.
    pub weight_decay: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
}

impl TrainSchedule {
    /// Paper defaults: constant lr 1e-3, batch 4096 (scale down by config).
    pub fn pretrain(epochs: usize, batch_size: usize) -> Self {
        TrainSchedule {
            stage: Stage::Pretrain,
            batch_size,
            epochs,
            lr: LrSchedule::Constant { lr: 1e-3 },
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: None,
        }
    }

    /// Paper defaults: warm-up + cosine to max 5e-4, batch 512 (scalable).
    pub fn finetune(epochs: usize, batch_size: usize, total_steps: u64) -> Self {
        TrainSchedule {
            stage: Stage::Finetune,
            batch_size,
            epochs,
            lr: LrSchedule::WarmupCosine {
                max_lr: 5e-4,
                warmup_steps: (total_steps / 10).max(1),
                total_steps,
            },
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// CSV training log: `step,lr,loss`.
pub fn format_train_log(records: &[TrainRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Train in place; returns the loss curve. A non-finite loss aborts with
/// the pre-step weights attached to the error.
pub fn train(
    model: &mut Seq2SeqModel,
    dataset: &SplitDataset,
    schedule: &TrainSchedule,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<TrainRecord>, Seq2SeqError> {
    for example in &dataset.train {
        if !schedule.stage.allows(example.task) {
            return Err(Seq2SeqError::IncompatibleTask(
                example.task.name(),
                schedule.stage.name(),
            ));
        }
    }
    let n = dataset.train.len();
    let mut opt = AdamW::new(&model.params, schedule.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(0x5eed));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(0xd0d0));
    let mut records = Vec::new();
    let mut step: u64 = 0;
    for _epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<&TaskExample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let mut tape = Tape::new();
            let loss_node = {
                let mut rng = Some(&mut dropout_rng);
                model.batch_loss(&mut tape, &batch, &mut rng)?
            };
            let loss = tape.scalar(loss_node);
            if !loss.is_finite() {
                let last_good =
                    model.to_checkpoint(Some(schedule.stage.name()), serde_json::Value::Null);
                return Err(Seq2SeqError::Diverged {
                    step,
                    last_good: Box::new(last_good),
                });
            }
            let mut grads = model.params.zero_grads();
            tape.backward(loss_node, &mut grads, 1.0);
            let lr = schedule.lr.lr_at(step);
            opt.step(&mut model.params, &grads, lr);
            records.push(TrainRecord { step, lr, loss });
            step += 1;
            if let (Some(every), Some(dir)) = (schedule.checkpoint_every, checkpoint_dir) {
                if step % every == 0 {
                    let ckpt = model.to_checkpoint(
                        Some(schedule.stage.name()),
                        serde_json::json!({ "step": step }),
                    );
                    ckpt.save(&dir.join(format!("step{step:06}.ckpt")))?;
                }
            }
        }
    }
    Ok(records)
}

/// Eval-side mean NLL over counted rows, for oracle comparisons.
pub fn nll_from_logits(logits: &Array2<f64>, targets: &[usize], counted: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, row) in logits.rows().into_iter().enumerate() {
        if !counted[i] {
            continue;
        }
        let row: Vec<f64> = row.to_vec();
        let logp = crate::autodiff::log_softmax_row(&row);
        total -= logp[targets[i]];
        n += 1;
    }
    total / n as f64
}
