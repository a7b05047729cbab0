//! Synthetic XRF-like corpus for smoke tests and desk-scale experiments.
//!
//! Each spectrum is a smooth decaying baseline plus 3 to 6 broad Gaussian
//! peaks, with Poisson-like noise and integer counts. Peaks sit near a fixed
//! set of line positions with slight jitter. The Ca Kα peak is always
//! present; each target is one designated peak's share of the total peak
//! area, times 100.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{GeochemLabel, Spectrum, Task};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::saliency::KEV_PER_CHANNEL;

/// (element, energy in keV) of the line positions peaks are drawn from.
pub const LINES: [(&str, f64); 10] = [
    ("Ca", 3.69),
    ("K", 3.31),
    ("Ti", 4.51),
    ("Mn", 5.90),
    ("Fe", 6.40),
    ("Ni", 7.48),
    ("Zn", 8.64),
    ("Br", 11.92),
    ("Sr", 14.16),
    ("Zr", 15.77),
];

const CA: usize = 0;
const BR: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_spectra: usize,
    pub n_channels: usize,
    pub n_cores: usize,
    pub min_peaks: usize,
    pub max_peaks: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub jitter_channels: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_spectra: 320,
            n_channels: 2048,
            n_cores: 4,
            min_peaks: 3,
            max_peaks: 6,
            sigma_min: 20.0,
            sigma_max: 60.0,
            amplitude_min: 200.0,
            amplitude_max: 2000.0,
            jitter_channels: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_spectra > 0
            && self.n_cores > 0
            && self.min_peaks >= 1
            && self.min_peaks <= self.max_peaks
            && self.max_peaks <= LINES.len()
            && 0.0 < self.sigma_min
            && self.sigma_min <= self.sigma_max
            && 0.0 < self.amplitude_min
            && self.amplitude_min <= self.amplitude_max
            && self.jitter_channels >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "inconsistent synthetic corpus settings: {self:?}"
            )));
        }
        let top = LINES.iter().map(|l| l.1).fold(0.0, f64::max);
        if (self.n_channels as f64) * KEV_PER_CHANNEL <= top {
            return Err(Error::InvalidArgument(format!(
                "{} channels do not reach the {top} keV line",
                self.n_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spectra: Vec<Spectrum>,
    pub labels: Vec<GeochemLabel>,
}

impl SynthCorpus {
    pub fn labels_for(&self, task: Task) -> Vec<GeochemLabel> {
        self.labels.iter().filter(|l| l.task == task).cloned().collect()
    }
}

fn line_channel(kev: f64) -> f64 {
    kev / KEV_PER_CHANNEL - 0.5
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut spectra = Vec::with_capacity(cfg.n_spectra);
    let mut labels = Vec::with_capacity(2 * cfg.n_spectra);
    let per_core = cfg.n_spectra.div_ceil(cfg.n_cores);
    for i in 0..cfg.n_spectra {
        let mut rng = rng::rng_for(cfg.seed, &[stream::SYNTH, i as u64]);
        let n_peaks = rng.random_range(cfg.min_peaks..=cfg.max_peaks);
        let mut others: Vec<usize> = (1..LINES.len()).collect();
        others.shuffle(&mut rng);
        let mut lines = vec![CA];
        lines.extend_from_slice(&others[..n_peaks - 1]);

        let decay = rng.random_range(300.0..900.0);
        let level = rng.random_range(10.0..40.0);
        let mut lambda: Vec<f64> = (0..cfg.n_channels)
            .map(|c| level * (-(c as f64) / decay).exp() + 2.0)
            .collect();
        let mut areas = [0.0; LINES.len()];
        for &l in &lines {
            let center = line_channel(LINES[l].1) + rng.random_range(-1.0..=1.0) * cfg.jitter_channels;
            let sigma = rng.random_range(cfg.sigma_min..=cfg.sigma_max);
            let amp = rng.random_range(cfg.amplitude_min..=cfg.amplitude_max);
            areas[l] = amp * sigma * (2.0 * std::f64::consts::PI).sqrt();
            for (c, v) in lambda.iter_mut().enumerate() {
                let z = (c as f64 - center) / sigma;
                *v += amp * (-0.5 * z * z).exp();
            }
        }
        let channels = lambda
            .iter()
            .map(|&lam| {
                let z: f64 = rng.sample(StandardNormal);
                (lam + lam.sqrt() * z).round().max(0.0)
            })
            .collect();
        let total: f64 = areas.iter().sum();
        let core = i / per_core;
        let record_id = format!("SYN{core:02}-{i:05}");
        for (task, line) in [(Task::CaCO3, CA), (Task::TOC, BR)] {
            labels.push(GeochemLabel {
                record_id: record_id.clone(),
                task,
                value_wt_pct: 100.0 * areas[line] / total,
            });
        }
        spectra.push(Spectrum {
            record_id,
            core_id: format!("SYN{core:02}"),
            depth_cm: (i % per_core) as f64 * 2.0,
            channels,
        });
    }
    Ok(SynthCorpus { spectra, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_spectra: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn corpus_shape_and_validity() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.spectra.len(), 12);
        assert_eq!(c.labels.len(), 24);
        for s in &c.spectra {
            assert_eq!(s.channels.len(), 2048);
            assert!(s.channels.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        }
        for l in &c.labels {
            assert!((0.0..=100.0).contains(&l.value_wt_pct));
        }
        assert!(c.labels_for(Task::CaCO3).iter().all(|l| l.value_wt_pct > 0.0));
    }

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap().spectra, generate(&other).unwrap().spectra);
    }

    #[test]
    fn calcium_peak_is_at_its_line() {
        let c = generate(&SynthConfig {
            n_spectra: 40,
            ..SynthConfig::default()
        })
        .unwrap();
        let ch = line_channel(3.69).round() as usize;
        let mean_at = |c0: usize| c.spectra.iter().map(|s| s.channels[c0]).sum::<f64>() / 40.0;
        assert!(mean_at(ch) > mean_at(ch + 150));
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(generate(&SynthConfig {
            min_peaks: 7,
            max_peaks: 6,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            n_channels: 512,
            ..small()
        })
        .is_err());
    }
}
