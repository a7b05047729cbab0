//! AdamW, the warmup + cosine learning-rate schedule, training loops and
//! checkpoints.

mod checkpoint;
pub(crate) mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, Stage, FORMAT_VERSION};
pub use train::{
    finetune, finetune_with, pretrain, pretrain_with, subsample_indices, write_metrics_csv, EpochSummary, FinetuneInit,
    MetricRow, TrainOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelParameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mask_ratio: f64,
}

impl TrainConfig {
    /// 100 epochs, batch 256, lr 1e-4 with 10 warmup epochs.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            base_lr: 1e-4,
            warmup_epochs: 10,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mask_ratio: 0.5,
        }
    }

    /// As pretraining but lr 1e-5 and warmup of a tenth of the epochs.
    pub fn finetune_default() -> Self {
        TrainConfig {
            base_lr: 1e-5,
            ..Self::pretrain_default()
        }
        .with_epochs_finetune(100)
    }

    /// Set `epochs` and the fine-tuning warmup, `floor(epochs / 10)`.
    pub fn with_epochs_finetune(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.warmup_epochs = epochs / 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }
}

/// Per-step learning rate: linear warmup `base · (step + 1) / warmup`, then
/// cosine annealing `base · ½ (1 + cos(π (step − warmup) / (total − warmup)))`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps || warmup_steps > total_steps {
        return Err(Error::InvalidArgument(format!(
            "lr_at needs step < total and warmup <= total (step {step}, total {total_steps}, warmup {warmup_steps})"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamWConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParameters,
    pub v: ModelParameters,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update of a flat tensor; `t` is the step number after
/// incrementing (first step is 1).
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= lr * cfg.weight_decay * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn adamw_step(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    let names = params
        .named()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect::<Vec<_>>();
    let grad_list = grads.named();
    if grad_list.len() != names.len() || state.m.named().len() != names.len() {
        return Err(Error::Shape(
            "gradient or optimizer tree does not mirror parameters".into(),
        ));
    }
    for ((name, shape), (_, g)) in names.iter().zip(&grad_list) {
        if g.shape() != *shape {
            return Err(Error::Shape(format!(
                "gradient of {name} is {:?}, parameter is {shape:?}",
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t;
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        adamw_update(
            p.as_mut_slice(),
            g.as_slice(),
            m.as_mut_slice(),
            v.as_mut_slice(),
            t,
            lr,
            cfg,
        );
    }
    Ok(())
}
