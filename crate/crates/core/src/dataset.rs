//! Spectra and geochemical label files, label alignment, and train/validation
//! splitting.
//!
//! Spectra CSV: `record_id,core_id,depth_cm,ch_0000,...,ch_NNNN`, one row per
//! spectrum. Labels CSV: `record_id,task,value_wt_pct` with task `CaCO3` or
//! `TOC`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_CHANNELS: usize = 2048;
const META_COLUMNS: [&str; 3] = ["record_id", "core_id", "depth_cm"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub record_id: String,
    pub core_id: String,
    pub depth_cm: f64,
    pub channels: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    CaCO3,
    TOC,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::CaCO3 => "CaCO3",
            Task::TOC => "TOC",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "caco3" => Ok(Task::CaCO3),
            "toc" => Ok(Task::TOC),
            other => Err(Error::InvalidArgument(format!(
                "unknown task {other:?} (expected CaCO3 or TOC)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeochemLabel {
    pub record_id: String,
    pub task: Task,
    pub value_wt_pct: f64,
}

/// A spectrum paired with one geochemical value.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSpectrum {
    pub spectrum: Spectrum,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn is_val(&self, id: &str) -> bool {
        self.val_ids.iter().any(|v| v == id)
    }

    /// Partition `items` by record id, preserving their order.
    pub fn partition<T: Clone>(&self, items: &[T], id: impl Fn(&T) -> &str) -> (Vec<T>, Vec<T>) {
        let val: HashSet<&str> = self.val_ids.iter().map(String::as_str).collect();
        items.iter().cloned().partition(|item| !val.contains(id(item)))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn load_spectra(path: impl AsRef<Path>, n_channels: usize) -> Result<Vec<Spectrum>> {
    let path = path.as_ref();
    read_spectra(open(path)?, &path.display().to_string(), n_channels)
}

pub fn read_spectra<R: Read>(reader: R, source: &str, n_channels: usize) -> Result<Vec<Spectrum>> {
    if n_channels == 0 {
        return Err(Error::InvalidArgument("n_channels must be positive".into()));
    }
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() != META_COLUMNS.len() + n_channels {
        return Err(parse_err(
            1,
            format!(
                "header has {} columns, expected {} ({} channels)",
                header.len(),
                META_COLUMNS.len() + n_channels,
                n_channels
            ),
        ));
    }
    for (i, name) in META_COLUMNS.iter().enumerate() {
        if &header[i] != *name {
            return Err(parse_err(
                1,
                format!("column {i} is {:?}, expected {name:?}", &header[i]),
            ));
        }
    }
    for c in 0..n_channels {
        let expected = channel_column(c);
        if header[META_COLUMNS.len() + c] != expected {
            return Err(parse_err(
                1,
                format!("column {} should be {expected}", META_COLUMNS.len() + c),
            ));
        }
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("row has {} columns, expected {}", record.len(), header.len()),
            ));
        }
        let record_id = record[0].to_string();
        let depth_cm: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("depth_cm {:?} is not a number", &record[2])))?;
        if !depth_cm.is_finite() || depth_cm < 0.0 {
            return Err(Error::Validation(format!(
                "{source}:{line}: depth_cm must be finite and non-negative, got {depth_cm}"
            )));
        }
        let mut channels = Vec::with_capacity(n_channels);
        for c in 0..n_channels {
            let raw = &record[META_COLUMNS.len() + c];
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("{} value {raw:?} is not a number", channel_column(c))))?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "{source}:{line}: {} has invalid count {v} (counts must be finite and non-negative)",
                    channel_column(c)
                )));
            }
            channels.push(v);
        }
        if !seen.insert(record_id.clone()) {
            return Err(Error::Validation(format!(
                "{source}:{line}: duplicate record_id {record_id:?}"
            )));
        }
        out.push(Spectrum {
            record_id,
            core_id: record[1].to_string(),
            depth_cm,
            channels,
        });
    }
    Ok(out)
}

pub fn channel_column(c: usize) -> String {
    format!("ch_{c:04}")
}

pub fn save_spectra(path: impl AsRef<Path>, spectra: &[Spectrum]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_spectra(file, spectra).map_err(|e| e.context(path.display().to_string()))
}

/// Values are written with the shortest representation that parses back to
/// the same `f64`, so load → save → load is exact.
pub fn write_spectra<W: Write>(writer: W, spectra: &[Spectrum]) -> Result<()> {
    let n = spectra.first().map_or(DEFAULT_CHANNELS, |s| s.channels.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..n).map(channel_column));
    w.write_record(&header).map_err(csv_err)?;
    for s in spectra {
        if s.channels.len() != n {
            return Err(Error::Shape(format!(
                "spectrum {} has {} channels, expected {n}",
                s.record_id,
                s.channels.len()
            )));
        }
        let mut row = Vec::with_capacity(n + 3);
        row.push(s.record_id.clone());
        row.push(s.core_id.clone());
        row.push(s.depth_cm.to_string());
        row.extend(s.channels.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv write failed: {e}"))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<GeochemLabel>> {
    let path = path.as_ref();
    read_labels(open(path)?, &path.display().to_string())
}

pub fn read_labels<R: Read>(reader: R, source: &str) -> Result<Vec<GeochemLabel>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["record_id", "task", "value_wt_pct"] {
        return Err(parse_err(1, "header must be record_id,task,value_wt_pct".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(parse_err(line, format!("row has {} columns, expected 3", record.len())));
        }
        let task: Task = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("unknown task {:?}", &record[1])))?;
        let value: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("value {:?} is not a number", &record[2])))?;
        if !value.is_finite() || !(0.0..=100.0).contains(&value) {
            return Err(Error::Validation(format!(
                "{source}:{line}: {task} value {value} outside [0, 100] wt%"
            )));
        }
        let record_id = record[0].to_string();
        if !seen.insert((record_id.clone(), task)) {
            return Err(Error::Validation(format!(
                "{source}:{line}: duplicate {task} label for {record_id:?}"
            )));
        }
        out.push(GeochemLabel {
            record_id,
            task,
            value_wt_pct: value,
        });
    }
    Ok(out)
}

pub fn write_labels<W: Write>(writer: W, labels: &[GeochemLabel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["record_id", "task", "value_wt_pct"]).map_err(csv_err)?;
    for l in labels {
        w.write_record([l.record_id.clone(), l.task.to_string(), l.value_wt_pct.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(())
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[GeochemLabel]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_labels(file, labels)
}

/// Join labels of one task onto spectra by record id. Output follows
/// spectrum order; unlabeled spectra are dropped.
pub fn align_labels(spectra: &[Spectrum], labels: &[GeochemLabel], task: Task) -> Result<Vec<LabeledSpectrum>> {
    let known: HashSet<&str> = spectra.iter().map(|s| s.record_id.as_str()).collect();
    let mut by_id: HashMap<&str, f64> = HashMap::new();
    let mut orphans = Vec::new();
    for l in labels.iter().filter(|l| l.task == task) {
        if known.contains(l.record_id.as_str()) {
            by_id.insert(l.record_id.as_str(), l.value_wt_pct);
        } else {
            orphans.push(l.record_id.clone());
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Alignment(orphans));
    }
    Ok(spectra
        .iter()
        .filter_map(|s| {
            by_id.get(s.record_id.as_str()).map(|&value| LabeledSpectrum {
                spectrum: s.clone(),
                value,
            })
        })
        .collect())
}

/// Seeded random split with `floor(N * ratio_val)` validation ids; the
/// remainder goes to training. Both lists keep the input order.
pub fn split_dataset(ids: &[String], ratio_val: f64, seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    if !(ratio_val > 0.0 && ratio_val < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation ratio must lie in (0, 1), got {ratio_val}"
        )));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Validation("split ids must be unique".into()));
    }
    let n_val = (ids.len() as f64 * ratio_val).floor() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng::rng_for(seed, &[rng::stream::SPLIT]));
    let mut is_val = vec![false; ids.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train_ids, mut val_ids) = (Vec::new(), Vec::new());
    for (id, v) in ids.iter().zip(is_val) {
        if v {
            val_ids.push(id.clone());
        } else {
            train_ids.push(id.clone());
        }
    }
    Ok(DatasetSplit {
        train_ids,
        val_ids,
        seed,
    })
}
