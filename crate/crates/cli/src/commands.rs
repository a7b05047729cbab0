use std::collections::HashSet;
use std::fs;
use std::io::BufWriter;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use xrf_mae::dataset::{
    align_labels, load_labels, load_spectra, save_labels, save_spectra, split_dataset, LabeledSpectrum, Spectrum, Task,
};
use xrf_mae::evaluate::{
    data_amount_sweep, distribution_shift_warning, evaluate_reconstruction, evaluate_regression, reconstruct_spectra,
    write_sweep_csv, Arm, EvalReport,
};
use xrf_mae::network::Model;
use xrf_mae::optimize::{
    finetune_with, load_checkpoint, pretrain_with, save_checkpoint, write_metrics_csv, Checkpoint, EpochSummary,
    FinetuneInit, MetricRow, Stage, TrainOutput,
};
use xrf_mae::patch_mask::DEFAULT_MASK_RATIO;
use xrf_mae::plot::{Plot, Style};
use xrf_mae::saliency::{annotate_peaks, saliency_map, write_annotations_csv, EmissionLineTable};
use xrf_mae::synthetic::{generate, SynthConfig};
use xrf_mae::transform::TransformKind;

use crate::args::*;
use crate::CliError;

type CmdResult = Result<(), CliError>;

const DEFAULT_VAL_RATIO: f64 = 0.2;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(run: &RunArgs, default_name: &str) -> Result<Self, CliError> {
        let parent = run.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        let root = parent.join(run.name.as_deref().unwrap_or(default_name));
        for dir in [root.clone(), root.join("plots")] {
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        Ok(RunDir { root })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }

    fn write_config(&self, resolved: &impl Serialize) -> CmdResult {
        let text = toml::to_string(resolved).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))?;
        write_file(&self.file("config.toml"), text)
    }
}

fn filled_run(run: &RunArgs, default_name: &str) -> RunArgs {
    RunArgs {
        run_dir: Some(run.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))),
        name: Some(run.name.clone().unwrap_or_else(|| default_name.into())),
    }
}

fn parse_task(s: Option<&str>) -> Result<Task, CliError> {
    Ok(require(s, "task")?.parse::<Task>()?)
}

fn parse_transform(s: Option<&str>) -> Result<TransformKind, CliError> {
    Ok(s.unwrap_or("instance").parse::<TransformKind>()?)
}

fn labeled(data: &Path, labels: &Path, task: Task, n_channels: usize) -> Result<Vec<LabeledSpectrum>, CliError> {
    let spectra = load_spectra(data, n_channels)?;
    let labels = load_labels(labels)?;
    Ok(align_labels(&spectra, &labels, task)?)
}

fn split_pairs(
    pairs: &[LabeledSpectrum],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<LabeledSpectrum>, Vec<LabeledSpectrum>), CliError> {
    let ids: Vec<String> = pairs.iter().map(|p| p.spectrum.record_id.clone()).collect();
    let split = split_dataset(&ids, ratio, seed)?;
    let (train, val) = split.partition(pairs, |p| &p.spectrum.record_id);
    Ok((train, val))
}

fn progress(stage: &'static str) -> impl FnMut(&EpochSummary, &Model) -> ControlFlow<()> {
    move |s, _| {
        let val = s.val_loss.map(|v| format!(" val_loss {v:.5}")).unwrap_or_default();
        let r2 = s.val_r2.map(|v| format!(" val_r2 {v:.4}")).unwrap_or_default();
        info!(
            "{stage} epoch {} train_loss {:.5}{val}{r2} lr {:.3e}",
            s.epoch, s.train_loss, s.lr
        );
        ControlFlow::Continue(())
    }
}

fn loss_plot(metrics: &[MetricRow], title: &str) -> String {
    let series = |split: &str| -> Vec<(f64, f64)> {
        metrics
            .iter()
            .filter(|m| m.split == split)
            .map(|m| (m.epoch as f64, m.loss))
            .collect()
    };
    Plot::new(title, "epoch", "loss")
        .series("train", series("train"), Style::LinePoints)
        .series("val", series("val"), Style::LinePoints)
        .to_svg()
}

fn save_training(run: &RunDir, out: &TrainOutput, title: &str) -> CmdResult {
    let dir = run.root.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    save_checkpoint(&out.final_checkpoint, run.checkpoint("final.ckpt"))?;
    save_checkpoint(&out.best_checkpoint, run.checkpoint("best.ckpt"))?;
    write_metrics_csv(run.file("metrics.csv"), &out.metrics)?;
    write_file(&run.plot("loss.svg"), loss_plot(&out.metrics, title))
}

fn held_out<'a, T>(items: &'a [T], ckpt: &Checkpoint, id: impl Fn(&T) -> &str) -> Vec<&'a T> {
    let used: HashSet<&str> = ckpt.train_ids.iter().map(String::as_str).collect();
    items.iter().filter(|x| !used.contains(id(x))).collect()
}

pub fn synth(args: SynthArgs) -> CmdResult {
    let a = with_file(args.clone(), args.config.as_deref())?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_spectra: a.n_spectra.unwrap_or(d.n_spectra),
        n_channels: a.n_channels.unwrap_or(d.n_channels),
        n_cores: a.n_cores.unwrap_or(d.n_cores),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let case_cores = a.case_cores.unwrap_or(0);
    if case_cores >= cfg.n_cores {
        return Err(CliError::Usage(format!(
            "--case-cores {case_cores} must be smaller than --n-cores {}",
            cfg.n_cores
        )));
    }
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let corpus = generate(&cfg)?;
    let case_ids: HashSet<String> = (cfg.n_cores - case_cores..cfg.n_cores)
        .map(|c| format!("SYN{c:02}"))
        .collect();
    let (case, main): (Vec<Spectrum>, Vec<Spectrum>) = corpus
        .spectra
        .iter()
        .cloned()
        .partition(|s| case_ids.contains(&s.core_id));
    let case_records: HashSet<&str> = case.iter().map(|s| s.record_id.as_str()).collect();
    let (case_labels, main_labels): (Vec<_>, Vec<_>) = corpus
        .labels
        .iter()
        .cloned()
        .partition(|l| case_records.contains(l.record_id.as_str()));
    save_spectra(out_dir.join("spectra.csv"), &main)?;
    save_labels(out_dir.join("labels.csv"), &main_labels)?;
    if case_cores > 0 {
        save_spectra(out_dir.join("case_study.csv"), &case)?;
        save_labels(out_dir.join("case_study_labels.csv"), &case_labels)?;
    }
    let resolved = SynthArgs {
        out_dir: Some(out_dir.clone()),
        n_spectra: Some(cfg.n_spectra),
        n_channels: Some(cfg.n_channels),
        n_cores: Some(cfg.n_cores),
        case_cores: Some(case_cores),
        seed: Some(cfg.seed),
        config: None,
    };
    let text = toml::to_string(&resolved).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&out_dir.join("synth_config.toml"), text)?;
    info!(
        "wrote {} spectra ({} case study) to {}",
        corpus.spectra.len(),
        case.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn pretrain(args: PretrainArgs) -> CmdResult {
    let a = with_file(args.clone(), args.config.as_deref())?;
    let data = require(a.data.clone(), "data")?;
    let model_config = a.model.resolve();
    model_config.validate()?;
    let mask_ratio = a.mask_ratio.unwrap_or(DEFAULT_MASK_RATIO);
    let cfg = a.train.resolve(false, mask_ratio);
    cfg.validate()?;
    let val_ratio = a.val_ratio.unwrap_or(DEFAULT_VAL_RATIO);
    let transform = parse_transform(a.transform.as_deref())?;

    let run = RunDir::create(&a.run, "pretrain")?;
    run.write_config(&PretrainArgs {
        data: Some(data.clone()),
        val_ratio: Some(val_ratio),
        mask_ratio: Some(mask_ratio),
        transform: Some(a.transform.clone().unwrap_or_else(|| "instance".into())),
        run: filled_run(&a.run, "pretrain"),
        model: ModelArgs::filled(&model_config),
        train: TrainArgs::filled(&cfg),
        config: None,
    })?;

    let spectra = load_spectra(&data, model_config.n_channels)?;
    let ids: Vec<String> = spectra.iter().map(|s| s.record_id.clone()).collect();
    let split = split_dataset(&ids, val_ratio, cfg.seed)?;
    let (train, val) = split.partition(&spectra, |s| &s.record_id);
    info!("pretraining on {} spectra, validating on {}", train.len(), val.len());
    let out = pretrain_with(&train, &val, transform, &model_config, &cfg, progress("pretrain"))?;
    save_training(&run, &out, "pretraining loss")?;
    info!("artifacts in {}", run.root.display());
    Ok(())
}

pub fn finetune(args: FinetuneArgs) -> CmdResult {
    let a = with_file(args.clone(), args.config.as_deref())?;
    let data = require(a.data.clone(), "data")?;
    let labels = require(a.labels.clone(), "labels")?;
    let task = parse_task(a.task.as_deref())?;
    let cfg = a.train.resolve(true, DEFAULT_MASK_RATIO);
    cfg.validate()?;
    let val_ratio = a.val_ratio.unwrap_or(DEFAULT_VAL_RATIO);
    let pretrained = a.from.as_ref().map(load_checkpoint).transpose()?;
    if let Some(p) = &pretrained {
        if p.stage != Stage::Pretrain {
            return Err(CliError::Usage("--from expects a pretraining checkpoint".into()));
        }
    }
    let model_config = match &pretrained {
        Some(p) => p.model_config.clone(),
        None => a.model.resolve(),
    };
    model_config.validate()?;
    let transform = parse_transform(a.transform.as_deref())?;

    let run = RunDir::create(&a.run, "finetune")?;
    run.write_config(&FinetuneArgs {
        data: Some(data.clone()),
        labels: Some(labels.clone()),
        task: Some(task.as_str().to_ascii_lowercase()),
        from: a.from.clone(),
        n: a.n,
        val_ratio: Some(val_ratio),
        transform: Some(match &pretrained {
            Some(p) => format!("{:?}", p.transform.kind).to_ascii_lowercase(),
            None => a.transform.clone().unwrap_or_else(|| "instance".into()),
        }),
        run: filled_run(&a.run, "finetune"),
        model: ModelArgs::filled(&model_config),
        train: TrainArgs::filled(&cfg),
        config: None,
    })?;

    let pairs = labeled(&data, &labels, task, model_config.n_channels)?;
    let (train, val) = split_pairs(&pairs, val_ratio, cfg.seed)?;
    let init = match &pretrained {
        Some(p) => FinetuneInit::Pretrained(p),
        None => FinetuneInit::Scratch {
            model_config: model_config.clone(),
            transform,
        },
    };
    info!(
        "fine-tuning {task} on {} of {} training records, validating on {}",
        a.n.unwrap_or(train.len()),
        train.len(),
        val.len()
    );
    let out = finetune_with(init, &train, &val, task, &cfg, a.n, progress("finetune"))?;
    save_training(&run, &out, &format!("{task} fine-tuning loss"))?;
    if !val.is_empty() {
        let report = evaluate_regression(&out.final_checkpoint, &val, "val")?;
        info!("validation R² {:.4}, RMSE {:.4} wt%", report.r2, report.rmse);
        write_report(&run, &report)?;
    }
    info!("artifacts in {}", run.root.display());
    Ok(())
}

fn write_report(run: &RunDir, report: &EvalReport) -> CmdResult {
    write_file(&run.file("report.json"), report.to_json())?;
    report.write_csv(create(&run.file("predictions.csv"))?)?;
    let mut summary = create(&run.file("metrics.csv"))?;
    let line = format!(
        "task,split,n,n_values,r2,rmse\n{},{},{},{},{},{}\n",
        report.task, report.split, report.n, report.n_values, report.r2, report.rmse
    );
    std::io::Write::write_all(&mut summary, line.as_bytes()).map_err(|e| io_err(&run.file("metrics.csv"), e))
}

fn parity_plot(report: &EvalReport) -> String {
    let pts: Vec<(f64, f64)> = report.predictions.iter().map(|p| (p.truth, p.prediction)).collect();
    let (lo, hi) = pts
        .iter()
        .flat_map(|p| [p.0, p.1])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    Plot::new(
        &format!("{} {} (R² {:.3})", report.task, report.split, report.r2),
        "truth",
        "prediction",
    )
    .series("y = x", vec![(lo, lo), (hi, hi)], Style::Line)
    .series("records", pts, Style::Points)
    .to_svg()
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    let a = with_file(args.clone(), args.config.as_deref())?;
    let ckpt_path = require(a.ckpt.clone(), "ckpt")?;
    let data = require(a.data.clone(), "data")?;
    let zero_shot = a.zero_shot.unwrap_or(false);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let seed = a.seed.unwrap_or(ckpt.train_config.seed);
    let mask_ratio = a.mask_ratio.unwrap_or(ckpt.train_config.mask_ratio);
    let split = if zero_shot { "zero-shot" } else { "heldout" };

    let run = RunDir::create(&a.run, "evaluate")?;
    run.write_config(&EvaluateArgs {
        ckpt: Some(ckpt_path.clone()),
        data: Some(data.clone()),
        labels: a.labels.clone(),
        zero_shot: Some(zero_shot),
        mask_ratio: Some(mask_ratio),
        seed: Some(seed),
        run: filled_run(&a.run, "evaluate"),
        config: None,
    })?;

    let n_channels = ckpt.model_config.n_channels;
    let report = match ckpt.stage {
        Stage::Pretrain => {
            let spectra = load_spectra(&data, n_channels)?;
            let chosen: Vec<Spectrum> = if zero_shot {
                spectra
            } else {
                held_out(&spectra, &ckpt, |s| &s.record_id)
                    .into_iter()
                    .cloned()
                    .collect()
            };
            evaluate_reconstruction(&ckpt, &chosen, mask_ratio, seed, split)?
        }
        Stage::Finetune => {
            let labels = require(a.labels.clone(), "labels")?;
            let task = ckpt
                .task
                .ok_or_else(|| CliError::Data("fine-tuned checkpoint records no task".into()))?;
            let pairs = labeled(&data, &labels, task, n_channels)?;
            let used: HashSet<&str> = ckpt.train_ids.iter().map(String::as_str).collect();
            let train_values: Vec<f64> = pairs
                .iter()
                .filter(|p| used.contains(p.spectrum.record_id.as_str()))
                .map(|p| p.value)
                .collect();
            let chosen: Vec<LabeledSpectrum> = if zero_shot {
                pairs
            } else {
                held_out(&pairs, &ckpt, |p| &p.spectrum.record_id)
                    .into_iter()
                    .cloned()
                    .collect()
            };
            let eval_values: Vec<f64> = chosen.iter().map(|p| p.value).collect();
            match (&ckpt.target_norm, train_values.is_empty()) {
                (_, false) => distribution_shift_warning(&train_values, &eval_values),
                (Some(norm), true) => distribution_shift_warning(&[norm.target_mean.unwrap_or(0.0)], &eval_values),
                (None, true) => None,
            };
            evaluate_regression(&ckpt, &chosen, split)?
        }
    };
    info!(
        "{} {split}: n {} R² {:.4} RMSE {:.4}",
        report.task, report.n, report.r2, report.rmse
    );
    write_report(&run, &report)?;
    write_file(&run.plot("parity.svg"), parity_plot(&report))
}

fn parse_grid(grid: &str, n_train: usize) -> Result<Vec<usize>, CliError> {
    grid.split(',')
        .map(|g| match g.trim() {
            "all" => Ok(n_train),
            other => other
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad grid entry {other:?}; expected integers or `all`"))),
        })
        .collect()
}

pub fn sweep(args: SweepArgs) -> CmdResult {
    let a = with_file(args.clone(), args.config.as_deref())?;
    let from = require(a.from.clone(), "from")?;
    let data = require(a.data.clone(), "data")?;
    let labels = require(a.labels.clone(), "labels")?;
    let task = parse_task(a.task.as_deref())?;
    let grid_text = a.grid.clone().unwrap_or_else(|| "10,50,100,500,all".into());
    let cfg = a.train.resolve(true, DEFAULT_MASK_RATIO);
    cfg.validate()?;
    let val_ratio = a.val_ratio.unwrap_or(DEFAULT_VAL_RATIO);
    let ckpt = load_checkpoint(&from)?;

    let run = RunDir::create(&a.run, "sweep")?;
    run.write_config(&SweepArgs {
        from: Some(from.clone()),
        data: Some(data.clone()),
        labels: Some(labels.clone()),
        task: Some(task.as_str().to_ascii_lowercase()),
        grid: Some(grid_text.clone()),
        val_ratio: Some(val_ratio),
        run: filled_run(&a.run, "sweep"),
        train: TrainArgs::filled(&cfg),
        config: None,
    })?;

    let pairs = labeled(&data, &labels, task, ckpt.model_config.n_channels)?;
    let (train, val) = split_pairs(&pairs, val_ratio, cfg.seed)?;
    let grid = parse_grid(&grid_text, train.len())?;
    let rows = data_amount_sweep(&ckpt, &train, &val, task, &grid, &|_| cfg.clone())?;
    for r in &rows {
        info!(
            "n {} {}: R² {:.4} RMSE {:.4}",
            r.n_finetune,
            r.arm.as_str(),
            r.r2,
            r.rmse
        );
    }
    write_sweep_csv(create(&run.file("sweep.csv"))?, &rows)?;
    let curve = |arm: Arm| {
        rows.iter()
            .filter(|r| r.arm == arm)
            .map(|r| (r.n_finetune as f64, r.r2))
            .collect()
    };
    let mut plot = Plot::new(
        &format!("{task} data-amount sweep"),
        "fine-tuning records",
        "validation R²",
    )
    .series("pretrained", curve(Arm::Pretrained), Style::LinePoints)
    .series("scratch", curve(Arm::Scratch), Style::LinePoints);
    plot.log_x = true;
    write_file(&run.plot("sweep.svg"), plot.to_svg())
}

#[derive(Serialize)]
struct SaliencyHeader<'a> {
    split: &'a str,
    seed: u64,
    checkpoint: &'a Path,
}

pub fn saliency(args: SaliencyArgs) -> CmdResult {
    let a = with_file(args.clone(), args.config.as_deref())?;
    let ckpt_path = require(a.ckpt.clone(), "ckpt")?;
    let data = require(a.data.clone(), "data")?;
    let labels = require(a.labels.clone(), "labels")?;
    let split = a.split.clone().unwrap_or_else(|| "heldout".into());
    let batch_size = a.batch_size.unwrap_or(32);
    let top_k = a.top_k.unwrap_or(10);
    let window = a.window.unwrap_or(0.05);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let seed = a.seed.unwrap_or(ckpt.train_config.seed);
    let task = ckpt
        .task
        .ok_or_else(|| CliError::Usage("saliency needs a fine-tuned checkpoint".into()))?;
    let table = match &a.lines {
        Some(p) => EmissionLineTable::load(p)?,
        None => EmissionLineTable::bundled(),
    };

    let run = RunDir::create(&a.run, "saliency")?;
    run.write_config(&SaliencyArgs {
        ckpt: Some(ckpt_path.clone()),
        data: Some(data.clone()),
        labels: Some(labels.clone()),
        split: Some(split.clone()),
        batch_size: Some(batch_size),
        seed: Some(seed),
        lines: a.lines.clone(),
        top_k: Some(top_k),
        window: Some(window),
        run: filled_run(&a.run, "saliency"),
        config: None,
    })?;

    let pairs = labeled(&data, &labels, task, ckpt.model_config.n_channels)?;
    let train_ids: HashSet<&str> = ckpt.train_ids.iter().map(String::as_str).collect();
    let pool: Vec<LabeledSpectrum> = pairs
        .into_iter()
        .filter(|p| match split.as_str() {
            "train" => train_ids.contains(p.spectrum.record_id.as_str()),
            "heldout" => !train_ids.contains(p.spectrum.record_id.as_str()),
            _ => true,
        })
        .collect();
    if !matches!(split.as_str(), "train" | "heldout" | "all") {
        return Err(CliError::Usage(format!(
            "--split must be heldout, train or all, got {split:?}"
        )));
    }
    if pool.is_empty() {
        return Err(CliError::Data(format!("no labeled records in split {split:?}")));
    }
    let picked = xrf_mae::optimize::subsample_indices(pool.len(), batch_size.min(pool.len()), seed)?;
    let batch: Vec<LabeledSpectrum> = picked.into_iter().map(|i| pool[i].clone()).collect();
    let map = saliency_map(&ckpt, &batch, task)?;
    let peaks = annotate_peaks(&map, &table, top_k, window)?;
    for p in &peaks {
        let names: Vec<String> = p.lines.iter().map(|l| format!("{} {}", l.element, l.line)).collect();
        info!(
            "peak {:.3} keV saliency {:.3e} {}",
            p.energy_kev,
            p.saliency,
            names.join(", ")
        );
    }
    map.write_csv(create(&run.file("saliency.csv"))?)?;
    let mut meta: serde_json::Value = serde_json::from_str(&map.meta_json()).expect("valid json");
    meta["batch"] = serde_json::to_value(SaliencyHeader {
        split: &split,
        seed,
        checkpoint: &ckpt_path,
    })
    .expect("serializable");
    write_file(
        &run.file("saliency_meta.json"),
        serde_json::to_string_pretty(&meta).expect("json"),
    )?;
    write_annotations_csv(create(&run.file("peaks.csv"))?, &peaks)?;
    let pts: Vec<(f64, f64)> = map
        .energy_axis
        .iter()
        .copied()
        .zip(map.values.iter().copied())
        .collect();
    let svg = Plot::new(
        &format!("{task} saliency (batch of {})", map.batch_size),
        "energy (keV)",
        "|∂MSE/∂x|",
    )
    .series("saliency", pts, Style::Line)
    .to_svg();
    write_file(&run.plot("saliency.svg"), svg)
}

pub fn reconstruct(args: ReconstructArgs) -> CmdResult {
    let a = with_file(args.clone(), args.config.as_deref())?;
    let ckpt_path = require(a.ckpt.clone(), "ckpt")?;
    let data = require(a.data.clone(), "data")?;
    let n_examples = a.n_examples.unwrap_or(3);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let mask_ratio = a.mask_ratio.unwrap_or(ckpt.train_config.mask_ratio);
    let seed = a.seed.unwrap_or(ckpt.train_config.seed);

    let run = RunDir::create(&a.run, "reconstruct")?;
    run.write_config(&ReconstructArgs {
        ckpt: Some(ckpt_path.clone()),
        data: Some(data.clone()),
        n_examples: Some(n_examples),
        mask_ratio: Some(mask_ratio),
        seed: Some(seed),
        run: filled_run(&a.run, "reconstruct"),
        config: None,
    })?;

    let spectra = load_spectra(&data, ckpt.model_config.n_channels)?;
    let mut chosen: Vec<Spectrum> = held_out(&spectra, &ckpt, |s| &s.record_id)
        .into_iter()
        .cloned()
        .collect();
    if chosen.is_empty() {
        chosen = spectra;
    }
    chosen.truncate(n_examples.max(1));
    let recons = reconstruct_spectra(&ckpt, &chosen, mask_ratio, seed)?;
    let report = evaluate_reconstruction(&ckpt, &chosen, mask_ratio, seed, "examples")?;
    write_report(&run, &report)?;

    let size = ckpt.model_config.patch_size;
    let mut w = create(&run.file("reconstruction.csv"))?;
    let mut text = String::from("record_id,channel,energy_keV,original,reconstructed,masked\n");
    for (k, r) in recons.iter().enumerate() {
        let axis = xrf_mae::saliency::energy_axis(r.original.len());
        for (c, e) in axis.iter().enumerate() {
            let masked = r.plan.is_masked(c / size);
            text.push_str(&format!(
                "{},{c},{e:.3},{},{},{}\n",
                r.record_id,
                r.original[c],
                r.reconstructed[c],
                u8::from(masked)
            ));
        }
        let original: Vec<(f64, f64)> = axis.iter().copied().zip(r.original.iter().copied()).collect();
        let points: Vec<(f64, f64)> = (0..axis.len())
            .filter(|c| r.plan.is_masked(c / size))
            .map(|c| (axis[c], r.reconstructed[c]))
            .collect();
        let mut plot = Plot::new(
            &format!("{} reconstruction", r.record_id),
            "energy (keV)",
            "transformed intensity",
        )
        .series("original", original, Style::Line)
        .series("reconstruction", points, Style::Points);
        plot.bands = r
            .plan
            .masked
            .iter()
            .map(|&p| (axis[p * size] - 0.01, axis[p * size + size - 1] + 0.01))
            .collect();
        write_file(&run.plot(&format!("reconstruction_{k}.svg")), plot.to_svg())?;
    }
    std::io::Write::write_all(&mut w, text.as_bytes()).map_err(|e| io_err(&run.file("reconstruction.csv"), e))?;
    info!("masked-reconstruction R² {:.4} over {} spectra", report.r2, report.n);
    Ok(())
}
