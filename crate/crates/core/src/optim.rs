//! AdamW with decoupled weight decay and the warm-up + cosine learning
//! rate schedule used for fine-tuning.

use crate::autodiff::{Grads, ParamSet};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// AdamW optimizer state. Weight decay is decoupled from the gradient
/// update (applied directly to the parameters, scaled by the lr).
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros = params.zero_grads().tensors;
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for pid in 0..params.len() {
            let g = &grads.tensors[pid];
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = params.get_mut(pid);
            for ((p, m), v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }
}

/// Learning rate policy over training steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warm-up from 0 to `max_lr`, then cosine decay to 0 at
    /// `total_steps`.
    WarmupCosine {
        max_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine {
                max_lr,
                warmup_steps,
                total_steps,
            } => {
                if warmup_steps > 0 && step < warmup_steps {
                    max_lr * (step + 1) as f64 / warmup_steps as f64
                } else if step >= total_steps {
                    0.0
                } else {
                    let denom = (total_steps - warmup_steps).max(1) as f64;
                    let progress = (step - warmup_steps) as f64 / denom;
                    max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

/// Uniform Xavier/Glorot initialization for a weight matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Small-scale normal-ish init for embedding tables.
pub fn embedding_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}
