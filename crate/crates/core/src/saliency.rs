//! Input-gradient saliency maps and emission-line annotation.
//!
//! The map is `|∂(ŷ − y)² / ∂x|` per channel, taken with respect to the
//! transformed spectrum the model consumes, and averaged over a batch.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSpectrum, Task};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::optimize::Checkpoint;
use crate::patch_mask::{patchify, unpatchify};
use crate::transform::TransformState;

pub const KEV_PER_CHANNEL: f64 = 0.020;
/// Upper end of the detector range, 2048 × 20 eV rounded up.
pub const MAX_LINE_KEV: f64 = 41.0;

/// Bin-center energy `(index + ½) · 20 eV`.
pub fn channel_to_energy(index: usize, n_channels: usize) -> Result<f64> {
    if index >= n_channels {
        return Err(Error::InvalidArgument(format!(
            "channel {index} out of range for {n_channels} channels"
        )));
    }
    Ok((index as f64 + 0.5) * KEV_PER_CHANNEL)
}

pub fn energy_axis(n_channels: usize) -> Vec<f64> {
    (0..n_channels).map(|i| (i as f64 + 0.5) * KEV_PER_CHANNEL).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
    pub energy_axis: Vec<f64>,
    pub batch_size: usize,
    pub task: Task,
    pub record_ids: Vec<String>,
}

#[derive(Serialize)]
struct SaliencyMeta<'a> {
    task: Task,
    batch_size: usize,
    n_channels: usize,
    gradient_space: &'static str,
    record_ids: &'a [String],
}

impl SaliencyMap {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fail = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        w.write_record(["channel", "energy_keV", "saliency"]).map_err(fail)?;
        for (i, (e, v)) in self.energy_axis.iter().zip(&self.values).enumerate() {
            w.write_record([i.to_string(), format!("{e:.3}"), v.to_string()])
                .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&SaliencyMeta {
            task: self.task,
            batch_size: self.batch_size,
            n_channels: self.values.len(),
            gradient_space: "transformed input",
            record_ids: &self.record_ids,
        })
        .expect("metadata serializes")
    }
}

/// Per-channel `|∂(ŷ − y)² / ∂x|` for one spectrum, in transformed space.
pub fn spectrum_saliency(
    model: &Model,
    transform: &TransformState,
    target_norm: &TransformState,
    pair: &LabeledSpectrum,
) -> Result<Vec<f64>> {
    let x = transform.apply(&pair.spectrum.channels)?;
    let patches = patchify(&x, &model.config().grid())?;
    let target = target_norm.apply_target(pair.value)?;
    let (_, grad) = model.regression_input_gradient(&patches, target)?;
    Ok(unpatchify(&grad).into_iter().map(f64::abs).collect())
}

pub fn saliency_from_model(
    model: &Model,
    transform: &TransformState,
    target_norm: &TransformState,
    batch: &[LabeledSpectrum],
    task: Task,
) -> Result<SaliencyMap> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("saliency needs at least one spectrum".into()));
    }
    if !model.has_head() {
        return Err(Error::InvalidArgument(
            "saliency needs a fine-tuned model with a regression head".into(),
        ));
    }
    let maps = batch
        .par_iter()
        .map(|p| spectrum_saliency(model, transform, target_norm, p))
        .collect::<Result<Vec<_>>>()?;
    let n = model.config().n_channels;
    let mut values = vec![0.0; n];
    for m in &maps {
        for (v, s) in values.iter_mut().zip(m) {
            *v += s;
        }
    }
    for v in &mut values {
        *v /= batch.len() as f64;
    }
    Ok(SaliencyMap {
        values,
        energy_axis: energy_axis(n),
        batch_size: batch.len(),
        task,
        record_ids: batch.iter().map(|p| p.spectrum.record_id.clone()).collect(),
    })
}

pub fn saliency_map(ckpt: &Checkpoint, batch: &[LabeledSpectrum], task: Task) -> Result<SaliencyMap> {
    if ckpt.params.head.is_none() {
        return Err(Error::InvalidArgument(
            "checkpoint has no regression head; saliency needs a fine-tuned checkpoint".into(),
        ));
    }
    if let Some(t) = ckpt.task {
        if t != task {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was fine-tuned for {t}, not {task}"
            )));
        }
    }
    let target_norm = ckpt
        .target_norm
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks target normalization".into()))?;
    let model = Model::new(ckpt.model_config.clone(), ckpt.params.clone())?;
    saliency_from_model(&model, &ckpt.transform, target_norm, batch, task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionLine {
    pub element: String,
    pub line: String,
    #[serde(rename = "energy_keV")]
    pub energy_kev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmissionLineTable {
    pub lines: Vec<EmissionLine>,
}

const BUNDLED_LINES: &str = include_str!("../data/emission_lines.csv");

impl EmissionLineTable {
    pub fn new(lines: Vec<EmissionLine>) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Validation("emission line table is empty".into()));
        }
        if let Some(bad) = lines
            .iter()
            .find(|l| !(l.energy_kev > 0.0 && l.energy_kev <= MAX_LINE_KEV))
        {
            return Err(Error::Validation(format!(
                "{} {} energy {} keV outside (0, {MAX_LINE_KEV}]",
                bad.element, bad.line, bad.energy_kev
            )));
        }
        Ok(EmissionLineTable { lines })
    }

    /// Common K and L lines shipped with the crate.
    pub fn bundled() -> Self {
        Self::read_csv(BUNDLED_LINES.as_bytes()).expect("bundled table is valid")
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let lines = rdr
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| Error::Validation(format!("emission line row {}: {e}", i + 2))))
            .collect::<Result<Vec<EmissionLine>>>()?;
        Self::new(lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Indices strictly above both neighbours; a plateau counts once, at its
/// leftmost index. Endpoints never qualify.
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < values.len() {
        if values[i] > values[i - 1] {
            let mut j = i;
            while j + 1 < values.len() && values[j + 1] == values[i] {
                j += 1;
            }
            if j + 1 < values.len() && values[j + 1] < values[i] {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeakAnnotation {
    pub channel: usize,
    pub energy_kev: f64,
    pub saliency: f64,
    pub lines: Vec<EmissionLine>,
    /// Lines whose doubled energy falls in the window (detector sum peaks).
    pub sum_peaks: Vec<EmissionLine>,
}

/// The `top_k` highest local maxima, each paired with table lines within
/// `±window_kev` and with sum-peak candidates at twice a line's energy.
pub fn annotate_peaks(
    map: &SaliencyMap,
    table: &EmissionLineTable,
    top_k: usize,
    window_kev: f64,
) -> Result<Vec<PeakAnnotation>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    if window_kev.is_nan() || window_kev <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "window must be positive, got {window_kev}"
        )));
    }
    if table.lines.is_empty() {
        return Err(Error::Validation("emission line table is empty".into()));
    }
    let mut peaks = local_maxima(&map.values);
    peaks.sort_by(|a, b| map.values[*b].total_cmp(&map.values[*a]).then(a.cmp(b)));
    peaks.truncate(top_k);
    Ok(peaks
        .into_iter()
        .map(|c| {
            let e = map.energy_axis[c];
            let near = |target: f64| (e - target).abs() <= window_kev;
            PeakAnnotation {
                channel: c,
                energy_kev: e,
                saliency: map.values[c],
                lines: table.lines.iter().filter(|l| near(l.energy_kev)).cloned().collect(),
                sum_peaks: table
                    .lines
                    .iter()
                    .filter(|l| near(2.0 * l.energy_kev))
                    .cloned()
                    .collect(),
            }
        })
        .collect())
}

pub fn write_annotations_csv<W: Write>(writer: W, peaks: &[PeakAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    w.write_record(["rank", "channel", "energy_keV", "saliency", "lines", "sum_peaks"])
        .map_err(fail)?;
    let join = |ls: &[EmissionLine]| {
        ls.iter()
            .map(|l| format!("{} {}", l.element, l.line))
            .collect::<Vec<_>>()
            .join(";")
    };
    for (rank, p) in peaks.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            p.channel.to_string(),
            format!("{:.3}", p.energy_kev),
            p.saliency.to_string(),
            join(&p.lines),
            join(&p.sum_peaks),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))
}
