//! Pretraining and fine-tuning loops.
//!
//! Per-sample gradients are computed in fixed-size chunks (in parallel when
//! threads are available) and summed in a fixed order, so results do not
//! depend on the thread count.

use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSpectrum, Spectrum, Task};
use crate::error::{Error, Result};
use crate::evaluate::r_squared;
use crate::network::{Model, ModelConfig, ModelParameters};
use crate::optimize::checkpoint::{Checkpoint, RngState, Stage};
use crate::optimize::{adamw_step, lr_at, AdamWConfig, OptimizerState, TrainConfig};
use crate::patch_mask::{patchify, sample_mask, MaskPlan};
use crate::rng::{self, derive_seed, stream};
use crate::tensor::Matrix;
use crate::transform::{fit_target_norm, TransformKind, TransformState};

const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
}

/// Passed to the per-epoch hook after validation.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Masked-value R² when pretraining, prediction R² when fine-tuning.
    pub val_r2: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub final_checkpoint: Checkpoint,
    /// Lowest validation loss; the final state when there is no validation set.
    pub best_checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    pub stopped_early: bool,
}

pub enum FinetuneInit<'a> {
    Pretrained(&'a Checkpoint),
    Scratch {
        model_config: ModelConfig,
        transform: TransformKind,
    },
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "split", "loss", "lr"]).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            r.loss.to_string(),
            r.lr.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `n` distinct indices of `0..total`, chosen by seed and returned ascending.
pub fn subsample_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "cannot subsample {n} records from a training set of {total}"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::rng_for(seed, &[stream::SUBSAMPLE]));
    let mut picked = order[..n].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn prepare(spectra: &[&Spectrum], transform: &TransformState, cfg: &ModelConfig) -> Result<Vec<Matrix>> {
    let grid = cfg.grid();
    spectra
        .iter()
        .map(|s| {
            let x = transform
                .apply(&s.channels)
                .map_err(|e| e.context(format!("transforming {}", s.record_id)))?;
            patchify(&x, &grid).map_err(|e| e.context(format!("record {}", s.record_id)))
        })
        .collect()
}

/// Sum of per-item losses and of per-item (already weighted) gradients.
fn accumulate<F>(items: &[usize], f: F) -> Result<(f64, ModelParameters)>
where
    F: Fn(usize) -> Result<(f64, ModelParameters)> + Sync,
{
    let partials: Vec<Result<(f64, ModelParameters)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let (mut loss, mut grad) = f(chunk[0])?;
            for &i in &chunk[1..] {
                let (l, g) = f(i)?;
                loss += l;
                grad.add_scaled(&g, 1.0);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch")?;
    for p in iter {
        let (l, g) = p?;
        loss += l;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad))
}

struct Schedule {
    total_steps: usize,
    warmup_steps: usize,
    batches: usize,
}

impl Schedule {
    fn new(cfg: &TrainConfig, n_train: usize) -> Self {
        let batches = n_train.div_ceil(cfg.batch_size);
        Schedule {
            total_steps: cfg.epochs * batches,
            warmup_steps: cfg.warmup_epochs * batches,
            batches,
        }
    }
}

trait Objective: Sync {
    fn n_train(&self) -> usize;
    fn sample_loss_grad(
        &self,
        model: &Model,
        epoch: usize,
        index: usize,
        weight: f64,
    ) -> Result<(f64, ModelParameters)>;
    /// Validation loss and R², or `None` without a validation set.
    fn validate(&self, model: &Model) -> Result<Option<(f64, Option<f64>)>>;
}

fn run(
    mut model: Model,
    objective: &dyn Objective,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&EpochSummary, &Model) -> ControlFlow<()>,
    mut checkpoint: impl FnMut(&Model, usize, &[MetricRow]) -> Checkpoint,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = objective.n_train();
    if n == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let schedule = Schedule::new(cfg, n);
    let adamw = AdamWConfig::from(cfg);
    let mut state = OptimizerState::new(model.params());
    let mut metrics = Vec::new();
    let mut best: Option<(f64, ModelParameters, usize)> = None;
    let mut stopped_early = false;
    let mut epochs_done = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * schedule.batches + b;
            lr = lr_at(step, schedule.total_steps, schedule.warmup_steps, cfg.base_lr)?;
            let weight = 1.0 / batch.len() as f64;
            let (loss, grads) = accumulate(batch, |i| objective.sample_loss_grad(&model, epoch, i, weight))
                .map_err(|e| e.context(format!("epoch {epoch}, batch {b}")))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            epoch_loss += loss;
            adamw_step(model.params_mut(), &grads, &mut state, lr, &adamw)
                .map_err(|e| e.context(format!("epoch {epoch}, batch {b}")))?;
        }
        let train_loss = epoch_loss / n as f64;
        metrics.push(MetricRow {
            epoch,
            split: "train".into(),
            loss: train_loss,
            lr,
        });
        let validation = objective
            .validate(&model)
            .map_err(|e| e.context(format!("validation after epoch {epoch}")))?;
        if let Some((val_loss, _)) = validation {
            metrics.push(MetricRow {
                epoch,
                split: "val".into(),
                loss: val_loss,
                lr,
            });
            if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
                best = Some((val_loss, model.params().clone(), epoch + 1));
            }
        }
        epochs_done = epoch + 1;
        let summary = EpochSummary {
            epoch,
            train_loss,
            val_loss: validation.map(|v| v.0),
            val_r2: validation.and_then(|v| v.1),
            lr,
        };
        if hook(&summary, &model).is_break() {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    let final_checkpoint = checkpoint(&model, epochs_done, &metrics);
    let best_checkpoint = match best {
        Some((_, params, epoch)) => {
            let config = model.config().clone();
            let best_model = Model::new(config, params)?;
            checkpoint(&best_model, epoch, &metrics)
        }
        None => final_checkpoint.clone(),
    };
    Ok(TrainOutput {
        final_checkpoint,
        best_checkpoint,
        metrics,
        stopped_early,
    })
}

struct Pretrain {
    train: Vec<Matrix>,
    val: Vec<Matrix>,
    val_plans: Vec<MaskPlan>,
    n_patches: usize,
    mask_ratio: f64,
    seed: u64,
}

impl Objective for Pretrain {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn sample_loss_grad(
        &self,
        model: &Model,
        epoch: usize,
        index: usize,
        weight: f64,
    ) -> Result<(f64, ModelParameters)> {
        let mask_seed = derive_seed(self.seed, &[stream::MASK, epoch as u64, index as u64]);
        let plan = sample_mask(self.n_patches, self.mask_ratio, mask_seed)?;
        model.pretrain_loss_grad(&self.train[index], &plan, weight)
    }

    fn validate(&self, model: &Model) -> Result<Option<(f64, Option<f64>)>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let recons: Vec<Result<Matrix>> = self
            .val
            .par_iter()
            .zip(&self.val_plans)
            .map(|(p, plan)| model.reconstruct(p, plan))
            .collect();
        let (mut loss, mut truth, mut pred) = (0.0, Vec::new(), Vec::new());
        for ((recon, p), plan) in recons.into_iter().zip(&self.val).zip(&self.val_plans) {
            let recon = recon?;
            loss += crate::network::masked_mse_loss(&recon, p, plan)?;
            for &m in &plan.masked {
                truth.extend_from_slice(p.row(m));
                pred.extend_from_slice(recon.row(m));
            }
        }
        Ok(Some((loss / self.val.len() as f64, r_squared(&truth, &pred).ok())))
    }
}

/// Fixed masks for validation, one per validation spectrum.
pub(crate) fn validation_plans(n_val: usize, n_patches: usize, ratio: f64, seed: u64) -> Result<Vec<MaskPlan>> {
    (0..n_val)
        .map(|i| sample_mask(n_patches, ratio, derive_seed(seed, &[stream::VAL_MASK, i as u64])))
        .collect()
}

pub fn pretrain(
    train: &[Spectrum],
    val: &[Spectrum],
    transform: TransformKind,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    pretrain_with(train, val, transform, model_config, cfg, |_, _| {
        ControlFlow::Continue(())
    })
}

/// As [`pretrain`], calling `hook` after every epoch; `Break` stops training.
pub fn pretrain_with(
    train: &[Spectrum],
    val: &[Spectrum],
    transform: TransformKind,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&EpochSummary, &Model) -> ControlFlow<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs at least one spectrum".into()));
    }
    if crate::patch_mask::mask_count(model_config.n_patches(), cfg.mask_ratio) == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {} masks no patch out of {}",
            cfg.mask_ratio,
            model_config.n_patches()
        )));
    }
    let state = TransformState::fit_spectral(transform, train)?;
    let objective = Pretrain {
        train: prepare(&train.iter().collect::<Vec<_>>(), &state, model_config)?,
        val: prepare(&val.iter().collect::<Vec<_>>(), &state, model_config)?,
        val_plans: validation_plans(val.len(), model_config.n_patches(), cfg.mask_ratio, cfg.seed)?,
        n_patches: model_config.n_patches(),
        mask_ratio: cfg.mask_ratio,
        seed: cfg.seed,
    };
    let model = Model::init_pretrain(model_config.clone(), cfg.seed)?;
    let train_ids: Vec<String> = train.iter().map(|s| s.record_id.clone()).collect();
    run(model, &objective, cfg, &mut hook, |m, epoch, metrics| Checkpoint {
        stage: Stage::Pretrain,
        task: None,
        model_config: m.config().clone(),
        params: m.params().clone(),
        transform: state.clone(),
        target_norm: None,
        train_config: cfg.clone(),
        epoch,
        rng: RngState {
            seed: cfg.seed,
            next_epoch: epoch,
        },
        metrics: metrics.to_vec(),
        train_ids: train_ids.clone(),
    })
}

struct Regression {
    train: Vec<Matrix>,
    train_targets: Vec<f64>,
    val: Vec<Matrix>,
    val_targets: Vec<f64>,
}

impl Objective for Regression {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn sample_loss_grad(
        &self,
        model: &Model,
        _epoch: usize,
        index: usize,
        weight: f64,
    ) -> Result<(f64, ModelParameters)> {
        model.regression_loss_grad(&self.train[index], self.train_targets[index], weight)
    }

    fn validate(&self, model: &Model) -> Result<Option<(f64, Option<f64>)>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let preds = self
            .val
            .par_iter()
            .map(|p| model.regression_forward(p))
            .collect::<Result<Vec<f64>>>()?;
        let loss = crate::network::regression_loss(&preds, &self.val_targets)?;
        Ok(Some((loss, r_squared(&self.val_targets, &preds).ok())))
    }
}

pub fn finetune(
    init: FinetuneInit<'_>,
    train: &[LabeledSpectrum],
    val: &[LabeledSpectrum],
    task: Task,
    cfg: &TrainConfig,
    subsample_n: Option<usize>,
) -> Result<TrainOutput> {
    finetune_with(init, train, val, task, cfg, subsample_n, |_, _| {
        ControlFlow::Continue(())
    })
}

/// Train encoder and a fresh regression head end to end on normalized
/// targets. Both arms (pretrained and scratch) share this path and draw the
/// head from the same seed stream.
pub fn finetune_with(
    init: FinetuneInit<'_>,
    train: &[LabeledSpectrum],
    val: &[LabeledSpectrum],
    task: Task,
    cfg: &TrainConfig,
    subsample_n: Option<usize>,
    mut hook: impl FnMut(&EpochSummary, &Model) -> ControlFlow<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let picked: Vec<&LabeledSpectrum> = match subsample_n {
        Some(k) => subsample_indices(train.len(), k, cfg.seed)?
            .into_iter()
            .map(|i| &train[i])
            .collect(),
        None => train.iter().collect(),
    };
    let spectra: Vec<&Spectrum> = picked.iter().map(|l| &l.spectrum).collect();
    let (model_config, transform, encoder) = match init {
        FinetuneInit::Pretrained(ckpt) => (
            ckpt.model_config.clone(),
            ckpt.transform.clone(),
            ckpt.params.encoder.clone(),
        ),
        FinetuneInit::Scratch {
            model_config,
            transform,
        } => {
            let owned: Vec<Spectrum> = spectra.iter().map(|s| (*s).clone()).collect();
            let state = TransformState::fit_spectral(transform, &owned)?;
            let params = ModelParameters::init(&model_config, false, false, cfg.seed)?;
            (model_config, state, params.encoder)
        }
    };
    let targets: Vec<f64> = picked.iter().map(|l| l.value).collect();
    let target_norm = fit_target_norm(&targets).map_err(|e| e.context("fitting target normalization"))?;
    let norm = |v: &[f64]| {
        v.iter()
            .map(|t| target_norm.apply_target(*t))
            .collect::<Result<Vec<f64>>>()
    };
    let objective = Regression {
        train: prepare(&spectra, &transform, &model_config)?,
        train_targets: norm(&targets)?,
        val: prepare(
            &val.iter().map(|l| &l.spectrum).collect::<Vec<_>>(),
            &transform,
            &model_config,
        )?,
        val_targets: norm(&val.iter().map(|l| l.value).collect::<Vec<_>>())?,
    };
    let params = ModelParameters {
        encoder,
        decoder: None,
        head: Some(ModelParameters::new_head(&model_config, cfg.seed)),
    };
    let model = Model::new(model_config, params)?;
    let train_ids: Vec<String> = picked.iter().map(|l| l.spectrum.record_id.clone()).collect();
    run(model, &objective, cfg, &mut hook, |m, epoch, metrics| Checkpoint {
        stage: Stage::Finetune,
        task: Some(task),
        model_config: m.config().clone(),
        params: m.params().clone(),
        transform: transform.clone(),
        target_norm: Some(target_norm.clone()),
        train_config: cfg.clone(),
        epoch,
        rng: RngState {
            seed: cfg.seed,
            next_epoch: epoch,
        },
        metrics: metrics.to_vec(),
        train_ids: train_ids.clone(),
    })
}
