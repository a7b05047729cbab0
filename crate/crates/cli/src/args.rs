//! Flag definitions. Every option can also come from a TOML file passed with
//! `--config`; flags win over file values, file values over defaults. The
//! fully resolved set is written back as `config.toml` in the run directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use xrf_mae::network::ModelConfig;
use xrf_mae::optimize::TrainConfig;

use crate::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "xrf-mae",
    version,
    about = "Masked-autoencoder pretraining and fine-tuning for XRF spectra"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic spectra/labels corpus.
    Synth(SynthArgs),
    /// Pretrain the masked autoencoder on unlabeled spectra.
    Pretrain(PretrainArgs),
    /// Fine-tune a regressor, from a pretraining checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Score a checkpoint (regression R² or masked-reconstruction R²).
    Evaluate(EvaluateArgs),
    /// Fine-tune both arms over a grid of training-set sizes.
    Sweep(SweepArgs),
    /// Input-gradient saliency map with emission-line annotation.
    Saliency(SaliencyArgs),
    /// Plot reconstructions of masked spectra.
    Reconstruct(ReconstructArgs),
}

/// Flag-over-file merge for option structs.
pub trait Overlay: Sized {
    fn overlay(self, top: Self) -> Self;
}

macro_rules! overlay_fields {
    ($ty:ident { $($field:ident),* } $(nested { $($nested:ident),* })?) => {
        impl Overlay for $ty {
            fn overlay(self, top: Self) -> Self {
                $ty {
                    $($field: top.$field.or(self.$field),)*
                    $($($nested: self.$nested.overlay(top.$nested),)*)?
                }
            }
        }
    };
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunArgs {
    /// Parent directory of run directories.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Run name; artifacts go to `<run-dir>/<name>/`.
    #[arg(long)]
    pub name: Option<String>,
}
overlay_fields!(RunArgs { run_dir, name });

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelArgs {
    #[arg(long)]
    pub n_channels: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub encoder_depth: Option<usize>,
    #[arg(long)]
    pub encoder_heads: Option<usize>,
    #[arg(long)]
    pub decoder_dim: Option<usize>,
    #[arg(long)]
    pub decoder_depth: Option<usize>,
    #[arg(long)]
    pub decoder_heads: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<f64>,
}
overlay_fields!(ModelArgs {
    n_channels,
    patch_size,
    embed_dim,
    encoder_depth,
    encoder_heads,
    decoder_dim,
    decoder_depth,
    decoder_heads,
    mlp_ratio
});

impl ModelArgs {
    pub fn resolve(&self) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            n_channels: self.n_channels.unwrap_or(d.n_channels),
            patch_size: self.patch_size.unwrap_or(d.patch_size),
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            encoder_depth: self.encoder_depth.unwrap_or(d.encoder_depth),
            encoder_heads: self.encoder_heads.unwrap_or(d.encoder_heads),
            decoder_dim: self.decoder_dim.unwrap_or(d.decoder_dim),
            decoder_depth: self.decoder_depth.unwrap_or(d.decoder_depth),
            decoder_heads: self.decoder_heads.unwrap_or(d.decoder_heads),
            mlp_ratio: self.mlp_ratio.unwrap_or(d.mlp_ratio),
        }
    }

    pub fn filled(c: &ModelConfig) -> Self {
        ModelArgs {
            n_channels: Some(c.n_channels),
            patch_size: Some(c.patch_size),
            embed_dim: Some(c.embed_dim),
            encoder_depth: Some(c.encoder_depth),
            encoder_heads: Some(c.encoder_heads),
            decoder_dim: Some(c.decoder_dim),
            decoder_depth: Some(c.decoder_depth),
            decoder_heads: Some(c.decoder_heads),
            mlp_ratio: Some(c.mlp_ratio),
        }
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}
overlay_fields!(TrainArgs {
    epochs,
    batch_size,
    lr,
    warmup_epochs,
    weight_decay,
    beta1,
    beta2,
    eps,
    seed
});

impl TrainArgs {
    /// Defaults follow the stage; fine-tuning warmup tracks `epochs / 10`
    /// unless given explicitly.
    pub fn resolve(&self, finetune: bool, mask_ratio: f64) -> TrainConfig {
        let mut base = if finetune {
            TrainConfig::finetune_default()
        } else {
            TrainConfig::pretrain_default()
        };
        if let Some(e) = self.epochs {
            base = if finetune {
                base.with_epochs_finetune(e)
            } else {
                TrainConfig {
                    epochs: e,
                    warmup_epochs: base.warmup_epochs.min(e),
                    ..base
                }
            };
        }
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            base_lr: self.lr.unwrap_or(base.base_lr),
            warmup_epochs: self.warmup_epochs.unwrap_or(base.warmup_epochs),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            beta1: self.beta1.unwrap_or(base.beta1),
            beta2: self.beta2.unwrap_or(base.beta2),
            eps: self.eps.unwrap_or(base.eps),
            seed: self.seed.unwrap_or(base.seed),
            mask_ratio,
            ..base
        }
    }

    pub fn filled(c: &TrainConfig) -> Self {
        TrainArgs {
            epochs: Some(c.epochs),
            batch_size: Some(c.batch_size),
            lr: Some(c.base_lr),
            warmup_epochs: Some(c.warmup_epochs),
            weight_decay: Some(c.weight_decay),
            beta1: Some(c.beta1),
            beta2: Some(c.beta2),
            eps: Some(c.eps),
            seed: Some(c.seed),
        }
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthArgs {
    /// Output directory for spectra.csv and labels.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub n_spectra: Option<usize>,
    #[arg(long)]
    pub n_channels: Option<usize>,
    #[arg(long)]
    pub n_cores: Option<usize>,
    /// Cores written separately to case_study.csv / case_study_labels.csv.
    #[arg(long)]
    pub case_cores: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
overlay_fields!(SynthArgs {
    out_dir,
    n_spectra,
    n_channels,
    n_cores,
    case_cores,
    seed,
    config
});

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainArgs {
    /// Spectra CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fraction of spectra held out for validation.
    #[arg(long)]
    pub val_ratio: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// instance, channel or log.
    #[arg(long)]
    pub transform: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// TOML file supplying any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
overlay_fields!(PretrainArgs { data, val_ratio, mask_ratio, transform, config } nested { run, model, train });

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labels CSV (record_id,task,value_wt_pct).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// caco3 or toc.
    #[arg(long)]
    pub task: Option<String>,
    /// Pretraining checkpoint; omit to train from scratch.
    #[arg(long = "from")]
    pub from: Option<PathBuf>,
    /// Number of training records to subsample.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub val_ratio: Option<f64>,
    /// Transform for the from-scratch arm (pretrained runs reuse the checkpoint's).
    #[arg(long)]
    pub transform: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
    /// Architecture for the from-scratch arm.
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
overlay_fields!(FinetuneArgs { data, labels, task, from, n, val_ratio, transform, config } nested { run, model, train });

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Required for fine-tuned checkpoints.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Score every record in the data, not only those held out from training.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub zero_shot: Option<bool>,
    /// Mask ratio for reconstruction scoring (pretraining checkpoints).
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
overlay_fields!(EvaluateArgs { ckpt, data, labels, zero_shot, mask_ratio, seed, config } nested { run });

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepArgs {
    #[arg(long = "from")]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// Comma-separated sizes; `all` means the whole training split.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub val_ratio: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
overlay_fields!(SweepArgs { from, data, labels, task, grid, val_ratio, config } nested { run, train });

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Records to draw the batch from: heldout, train or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emission-line CSV (element,line,energy_keV); defaults to the bundled table.
    #[arg(long)]
    pub lines: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Matching window in keV.
    #[arg(long)]
    pub window: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
overlay_fields!(SaliencyArgs { ckpt, data, labels, split, batch_size, seed, lines, top_k, window, config } nested { run });

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
overlay_fields!(ReconstructArgs { ckpt, data, n_examples, mask_ratio, seed, config } nested { run });

/// Merge `--config` file values under the flags.
pub fn with_file<T>(flags: T, config: Option<&Path>) -> Result<T, CliError>
where
    T: Overlay + Default + for<'de> Deserialize<'de>,
{
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    let file: T =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(file.overlay(flags))
}

pub fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}
