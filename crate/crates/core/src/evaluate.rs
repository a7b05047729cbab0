//! Metrics and evaluation harnesses: R², regression and reconstruction
//! reports, and data-amount sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSpectrum, Spectrum, Task};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::optimize::{finetune, Checkpoint, FinetuneInit, TrainConfig};
use crate::patch_mask::{patchify, MaskPlan};
use crate::transform::TransformState;

/// Coefficient of determination `1 − Σ(y − ŷ)² / Σ(y − ȳ)²`; unbounded below.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} truths for {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("R² of an empty set".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Validation("R² undefined: truth has zero variance".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "RMSE needs equal non-empty lengths, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let ss: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub record_id: String,
    pub truth: f64,
    pub prediction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `CaCO3`, `TOC`, or `reconstruction`.
    pub task: String,
    pub split: String,
    pub n: usize,
    pub r2: f64,
    pub rmse: f64,
    /// Number of values the metrics pool over (masked channels for
    /// reconstruction, `n` for regression).
    pub n_values: usize,
    pub predictions: Vec<PredictionRow>,
}

impl EvalReport {
    /// Per-record rows; for reconstruction, truth and prediction are means
    /// over that record's masked channels.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fail = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        w.write_record(["record_id", "truth", "prediction"]).map_err(fail)?;
        for p in &self.predictions {
            w.write_record([p.record_id.clone(), p.truth.to_string(), p.prediction.to_string()])
                .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn model_of(ckpt: &Checkpoint) -> Result<Model> {
    Model::new(ckpt.model_config.clone(), ckpt.params.clone())
}

/// Predict in wt% by inverting the target normalization.
pub fn predict(
    model: &Model,
    transform: &TransformState,
    target_norm: &TransformState,
    spectra: &[&Spectrum],
) -> Result<Vec<f64>> {
    let grid = model.config().grid();
    spectra
        .par_iter()
        .map(|s| {
            let x = transform.apply(&s.channels)?;
            let z = model.regression_forward(&patchify(&x, &grid)?)?;
            target_norm.invert_target(z)
        })
        .collect()
}

pub fn evaluate_regression(ckpt: &Checkpoint, pairs: &[LabeledSpectrum], split: &str) -> Result<EvalReport> {
    let target_norm = ckpt
        .target_norm
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks target normalization; was it fine-tuned?".into()))?;
    let task = ckpt
        .task
        .ok_or_else(|| Error::Checkpoint("checkpoint records no task".into()))?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no labeled spectra to evaluate".into()));
    }
    let model = model_of(ckpt)?;
    let spectra: Vec<&Spectrum> = pairs.iter().map(|p| &p.spectrum).collect();
    let pred = predict(&model, &ckpt.transform, target_norm, &spectra)?;
    let truth: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    Ok(EvalReport {
        task: task.as_str().into(),
        split: split.into(),
        n: pairs.len(),
        r2: r_squared(&truth, &pred)?,
        rmse: rmse(&truth, &pred)?,
        n_values: pairs.len(),
        predictions: pairs
            .iter()
            .zip(&pred)
            .map(|(p, y)| PredictionRow {
                record_id: p.spectrum.record_id.clone(),
                truth: p.value,
                prediction: *y,
            })
            .collect(),
    })
}

/// One reconstruction per spectrum, for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub record_id: String,
    pub original: Vec<f64>,
    pub reconstructed: Vec<f64>,
    pub plan: MaskPlan,
}

pub fn reconstruct_spectra(
    ckpt: &Checkpoint,
    spectra: &[Spectrum],
    mask_ratio: f64,
    seed: u64,
) -> Result<Vec<Reconstruction>> {
    if ckpt.params.decoder.is_none() {
        return Err(Error::InvalidArgument(
            "checkpoint has no decoder; use a pretraining checkpoint".into(),
        ));
    }
    let model = model_of(ckpt)?;
    let n_patches = model.config().n_patches();
    let plans = crate::optimize::train::validation_plans(spectra.len(), n_patches, mask_ratio, seed)?;
    if plans.iter().any(|p| p.masked.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {mask_ratio} masks no patch"
        )));
    }
    let grid = model.config().grid();
    spectra
        .par_iter()
        .zip(plans)
        .map(|(s, plan)| {
            let x = ckpt.transform.apply(&s.channels)?;
            let patches = patchify(&x, &grid)?;
            let recon = model.reconstruct(&patches, &plan)?;
            Ok(Reconstruction {
                record_id: s.record_id.clone(),
                original: x,
                reconstructed: recon.into_vec(),
                plan,
            })
        })
        .collect()
}

/// Masked-channel R² pooled over every masked value of every spectrum, in
/// transformed space. Masks are drawn per spectrum from `seed`.
pub fn evaluate_reconstruction(
    ckpt: &Checkpoint,
    spectra: &[Spectrum],
    mask_ratio: f64,
    seed: u64,
    split: &str,
) -> Result<EvalReport> {
    if spectra.is_empty() {
        return Err(Error::InvalidArgument("no spectra to reconstruct".into()));
    }
    let size = ckpt.model_config.patch_size;
    let recons = reconstruct_spectra(ckpt, spectra, mask_ratio, seed)?;
    let (mut truth, mut pred, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for r in &recons {
        let start = truth.len();
        for &p in &r.plan.masked {
            truth.extend_from_slice(&r.original[p * size..(p + 1) * size]);
            pred.extend_from_slice(&r.reconstructed[p * size..(p + 1) * size]);
        }
        let k = (truth.len() - start) as f64;
        rows.push(PredictionRow {
            record_id: r.record_id.clone(),
            truth: truth[start..].iter().sum::<f64>() / k,
            prediction: pred[start..].iter().sum::<f64>() / k,
        });
    }
    Ok(EvalReport {
        task: "reconstruction".into(),
        split: split.into(),
        n: spectra.len(),
        r2: r_squared(&truth, &pred)?,
        rmse: rmse(&truth, &pred)?,
        n_values: truth.len(),
        predictions: rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Pretrained,
    Scratch,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Pretrained => "pretrained",
            Arm::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: Task,
    pub n_finetune: usize,
    pub arm: Arm,
    pub r2: f64,
    pub rmse: f64,
    pub seed: u64,
}

/// For each training-set size, fine-tune from the pretrained encoder and
/// from fresh weights on the same subsample, then score both on the fixed
/// validation pairs. Rows follow grid order, pretrained arm first.
pub fn data_amount_sweep(
    pretrained: &Checkpoint,
    train: &[LabeledSpectrum],
    val: &[LabeledSpectrum],
    task: Task,
    grid: &[usize],
    config_for: &dyn Fn(usize) -> TrainConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(&n) = grid.iter().find(|&&n| n > train.len() || n < 2) {
        return Err(Error::InvalidArgument(format!(
            "sweep size {n} must lie in [2, {}]",
            train.len()
        )));
    }
    let mut rows = Vec::new();
    for &n in grid {
        let cfg = config_for(n);
        for arm in [Arm::Pretrained, Arm::Scratch] {
            let init = match arm {
                Arm::Pretrained => FinetuneInit::Pretrained(pretrained),
                Arm::Scratch => FinetuneInit::Scratch {
                    model_config: pretrained.model_config.clone(),
                    transform: pretrained.transform.kind,
                },
            };
            let out = finetune(init, train, &[], task, &cfg, Some(n))
                .map_err(|e| e.context(format!("sweep n={n}, {} arm", arm.as_str())))?;
            let report = evaluate_regression(&out.final_checkpoint, val, "val")?;
            rows.push(SweepRow {
                task,
                n_finetune: n,
                arm,
                r2: report.r2,
                rmse: report.rmse,
                seed: cfg.seed,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    w.write_record(["task", "n_finetune", "arm", "r2", "rmse", "seed"])
        .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.task.as_str().to_string(),
            r.n_finetune.to_string(),
            r.arm.as_str().to_string(),
            r.r2.to_string(),
            r.rmse.to_string(),
            r.seed.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))
}

/// Ratio of the larger to the smaller target mean above which a warning is raised.
pub const SHIFT_RATIO: f64 = 1.5;

/// A message when the evaluation targets' mean differs from the training
/// mean by more than [`SHIFT_RATIO`]×.
pub fn distribution_shift_warning(train: &[f64], eval: &[f64]) -> Option<String> {
    if train.is_empty() || eval.is_empty() {
        return None;
    }
    let mt = (train.iter().sum::<f64>() / train.len() as f64).abs();
    let me = (eval.iter().sum::<f64>() / eval.len() as f64).abs();
    let (lo, hi) = (mt.min(me), mt.max(me));
    if hi > SHIFT_RATIO * lo {
        let msg = format!("target distribution shift: training mean {mt:.4}, evaluation mean {me:.4}");
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    }
}
