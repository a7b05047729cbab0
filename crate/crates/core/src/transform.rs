//! Spectral transformations (instance-wise normalization, channel-wise
//! normalization, `ln(x + 1)`) and the target standardization used for
//! regression.
//!
//! All statistics are population statistics (divide by `n`). A zero standard
//! deviation is replaced by 1, both per channel and per instance.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::Spectrum;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    InstanceNorm,
    ChannelNorm,
    LogTransform,
    TargetNorm,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "instancenorm" | "instance" => Ok(TransformKind::InstanceNorm),
            "channelnorm" | "channel" => Ok(TransformKind::ChannelNorm),
            "logtransform" | "log" => Ok(TransformKind::LogTransform),
            other => Err(Error::InvalidArgument(format!(
                "unknown spectral transform {other:?} (expected instance, channel or log)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformState {
    pub kind: TransformKind,
    #[serde(default)]
    pub channel_means: Option<Vec<f64>>,
    #[serde(default)]
    pub channel_stds: Option<Vec<f64>>,
    #[serde(default)]
    pub target_mean: Option<f64>,
    #[serde(default)]
    pub target_std: Option<f64>,
}

fn population_mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(x_i - μ) / σ` with μ, σ taken over this spectrum.
pub fn instance_normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let (mean, mut std) = population_mean_std(x.iter().copied());
    if std == 0.0 {
        log::warn!("constant spectrum: instance standard deviation is 0, dividing by 1");
        std = 1.0;
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Per-channel mean and standard deviation over the training spectra.
pub fn fit_channel_stats(train: &[Spectrum]) -> Result<TransformState> {
    let rows: Vec<&[f64]> = train.iter().map(|s| s.channels.as_slice()).collect();
    fit_channel_stats_rows(&rows)
}

pub fn fit_channel_stats_rows(train: &[&[f64]]) -> Result<TransformState> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("channel statistics need a non-empty training set".into()))?;
    let n = first.len();
    if let Some(bad) = train.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "training spectra disagree on length ({} vs {n})",
            bad.len()
        )));
    }
    let mut means = Vec::with_capacity(n);
    let mut stds = Vec::with_capacity(n);
    for c in 0..n {
        let (m, s) = population_mean_std(train.iter().map(|r| r[c]));
        means.push(m);
        stds.push(if s == 0.0 { 1.0 } else { s });
    }
    Ok(TransformState {
        kind: TransformKind::ChannelNorm,
        channel_means: Some(means),
        channel_stds: Some(stds),
        target_mean: None,
        target_std: None,
    })
}

pub fn channel_normalize(x: &[f64], state: &TransformState) -> Result<Vec<f64>> {
    let (Some(means), Some(stds)) = (&state.channel_means, &state.channel_stds) else {
        return Err(Error::InvalidArgument(
            "channel normalization requires a fitted ChannelNorm state".into(),
        ));
    };
    if x.len() != means.len() {
        return Err(Error::Shape(format!(
            "spectrum has {} channels but the state was fitted on {}",
            x.len(),
            means.len()
        )));
    }
    Ok(x.iter()
        .zip(means.iter().zip(stds))
        .map(|(v, (m, s))| (v - m) / s)
        .collect())
}

pub fn log_transform(x: &[f64]) -> Result<Vec<f64>> {
    if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
        return Err(Error::Validation(format!(
            "log transform needs non-negative counts, channel {i} is {v}"
        )));
    }
    Ok(x.iter().map(|v| v.ln_1p()).collect())
}

impl TransformState {
    pub fn instance_norm() -> Self {
        Self::stateless(TransformKind::InstanceNorm)
    }

    pub fn log_transform() -> Self {
        Self::stateless(TransformKind::LogTransform)
    }

    fn stateless(kind: TransformKind) -> Self {
        TransformState {
            kind,
            channel_means: None,
            channel_stds: None,
            target_mean: None,
            target_std: None,
        }
    }

    /// Fit the spectral transform of `kind` on training spectra.
    pub fn fit_spectral(kind: TransformKind, train: &[Spectrum]) -> Result<Self> {
        match kind {
            TransformKind::InstanceNorm => Ok(Self::instance_norm()),
            TransformKind::LogTransform => Ok(Self::log_transform()),
            TransformKind::ChannelNorm => fit_channel_stats(train),
            TransformKind::TargetNorm => Err(Error::InvalidArgument("TargetNorm is not a spectral transform".into())),
        }
    }

    /// Apply a spectral transform to one spectrum's channels.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            TransformKind::InstanceNorm => Ok(instance_normalize(x)),
            TransformKind::ChannelNorm => channel_normalize(x, self),
            TransformKind::LogTransform => log_transform(x),
            TransformKind::TargetNorm => Err(Error::InvalidArgument(
                "TargetNorm state cannot transform spectra".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TransformKind::ChannelNorm => match (&self.channel_means, &self.channel_stds) {
                (Some(m), Some(s)) if m.len() == s.len() && s.iter().all(|v| *v > 0.0) => Ok(()),
                _ => Err(Error::Validation(
                    "ChannelNorm state needs equal-length means and positive stds".into(),
                )),
            },
            TransformKind::TargetNorm => match (self.target_mean, self.target_std) {
                (Some(m), Some(s)) if m.is_finite() && s > 0.0 => Ok(()),
                _ => Err(Error::Validation(
                    "TargetNorm state needs a finite mean and positive std".into(),
                )),
            },
            _ => Ok(()),
        }
    }

    fn target_params(&self) -> Result<(f64, f64)> {
        match (self.kind, self.target_mean, self.target_std) {
            (TransformKind::TargetNorm, Some(m), Some(s)) => Ok((m, s)),
            _ => Err(Error::InvalidArgument("not a fitted TargetNorm state".into())),
        }
    }

    pub fn apply_target(&self, v: f64) -> Result<f64> {
        let (m, s) = self.target_params()?;
        Ok((v - m) / s)
    }

    pub fn invert_target(&self, z: f64) -> Result<f64> {
        let (m, s) = self.target_params()?;
        Ok(z * s + m)
    }

    /// `channel_index,mean,std` rows for a ChannelNorm state.
    pub fn write_channel_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (Some(means), Some(stds)) = (&self.channel_means, &self.channel_stds) else {
            return Err(Error::InvalidArgument(
                "only ChannelNorm states have per-channel statistics".into(),
            ));
        };
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        w.write_record(["channel_index", "mean", "std"]).map_err(io)?;
        for (i, (m, s)) in means.iter().zip(stds).enumerate() {
            w.write_record([i.to_string(), m.to_string(), s.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(())
    }

    pub fn read_channel_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Validation(e.to_string()))?;
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Validation(format!("row {i}: {s:?} is not a number")))
            };
            if rec.len() != 3 || rec[0].parse::<usize>() != Ok(i) {
                return Err(Error::Validation(format!(
                    "row {i}: expected channel_index {i},mean,std"
                )));
            }
            means.push(parse(&rec[1])?);
            stds.push(parse(&rec[2])?);
        }
        let state = TransformState {
            kind: TransformKind::ChannelNorm,
            channel_means: Some(means),
            channel_stds: Some(stds),
            target_mean: None,
            target_std: None,
        };
        state.validate()?;
        Ok(state)
    }
}

/// Standardize regression targets by the training mean and standard deviation.
pub fn fit_target_norm(values: &[f64]) -> Result<TransformState> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(
            "target normalization needs at least 2 values".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression targets".into()));
    }
    let (mean, std) = population_mean_std(values.iter().copied());
    if std == 0.0 {
        return Err(Error::Validation(
            "targets have zero variance; a constant task cannot be trained".into(),
        ));
    }
    Ok(TransformState {
        kind: TransformKind::TargetNorm,
        channel_means: None,
        channel_stds: None,
        target_mean: Some(mean),
        target_std: Some(std),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one(ch: Vec<f64>) -> Spectrum {
        Spectrum {
            record_id: "r".into(),
            core_id: "c".into(),
            depth_cm: 0.0,
            channels: ch,
        }
    }

    #[test]
    fn instance_norm_hand_values() {
        // mean 2, population std sqrt(2/3)
        let out = instance_normalize(&[1.0, 2.0, 3.0]);
        let s = (2.0f64 / 3.0).sqrt();
        assert_relative_eq!(out[0], -1.0 / s, max_relative = 1e-12);
        assert_eq!(out[1], 0.0);
        assert_relative_eq!(out[2], 1.224744871391589, max_relative = 1e-9);
        assert_eq!(instance_normalize(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        let unit = [-1.0, 1.0, -1.0, 1.0];
        assert_eq!(instance_normalize(&unit), unit.to_vec());
    }

    #[test]
    fn channel_stats_divide_by_one_rule() {
        let train = vec![one(vec![0.0, 4.0, 7.0]), one(vec![2.0, 4.0, 7.0])];
        let st = fit_channel_stats(&train).unwrap();
        assert_eq!(st.channel_means.as_ref().unwrap(), &vec![1.0, 4.0, 7.0]);
        assert_eq!(st.channel_stds.as_ref().unwrap(), &vec![1.0, 1.0, 1.0]);
        assert_eq!(channel_normalize(&[3.0, 4.0, 8.0], &st).unwrap(), vec![2.0, 0.0, 1.0]);
        let single = fit_channel_stats(&[one(vec![3.0, 9.0])]).unwrap();
        assert_eq!(single.channel_stds.unwrap(), vec![1.0, 1.0]);
        assert!(fit_channel_stats(&[]).is_err());
        assert!(channel_normalize(&[1.0], &st).is_err());
    }

    #[test]
    fn channel_norm_centres_and_scales() {
        let train = vec![one(vec![1.0, 10.0]), one(vec![3.0, 30.0]), one(vec![8.0, 5.0])];
        let st = fit_channel_stats(&train).unwrap();
        let means = st.channel_means.clone().unwrap();
        let stds = st.channel_stds.clone().unwrap();
        assert!(channel_normalize(&means, &st).unwrap().iter().all(|v| v.abs() < 1e-15));
        let plus: Vec<f64> = means.iter().zip(&stds).map(|(m, s)| m + s).collect();
        for v in channel_normalize(&plus, &st).unwrap() {
            assert_relative_eq!(v, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn log_transform_values() {
        let e = std::f64::consts::E;
        let out = log_transform(&[0.0, e - 1.0, 65000.0]).unwrap();
        assert_eq!(out[0], 0.0);
        assert_relative_eq!(out[1], 1.0, max_relative = 1e-12);
        assert_relative_eq!(out[2], 11.082158, max_relative = 1e-6);
        assert!(log_transform(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn target_norm_round_trip() {
        let st = fit_target_norm(&[0.0, 2.0]).unwrap();
        assert_eq!(st.target_mean, Some(1.0));
        assert_eq!(st.target_std, Some(1.0));
        assert_eq!(st.apply_target(2.0).unwrap(), 1.0);
        assert_eq!(st.invert_target(1.0).unwrap(), 2.0);
        assert!(fit_target_norm(&[3.0, 3.0, 3.0]).is_err());
        assert!(fit_target_norm(&[3.0]).is_err());
        assert!(TransformState::instance_norm().apply_target(1.0).is_err());
    }

    #[test]
    fn channel_csv_round_trip() {
        let st = fit_channel_stats(&[one(vec![0.1, 4.0]), one(vec![2.0, 4.0])]).unwrap();
        let mut buf = Vec::new();
        st.write_channel_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("channel_index,mean,std\n"));
        assert_eq!(TransformState::read_channel_csv(buf.as_slice()).unwrap(), st);
    }

    fn spectrum_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..65000.0, 2..64)
            .prop_filter("non-constant", |v| v.iter().any(|x| (x - v[0]).abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn instance_norm_standardizes(x in spectrum_strategy()) {
            let out = instance_normalize(&x);
            let (m, s) = population_mean_std(out.iter().copied());
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn instance_norm_scale_invariant(x in spectrum_strategy(), c in 1e-3f64..1e3) {
            let a = instance_normalize(&x);
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let b = instance_normalize(&scaled);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn log_transform_monotone(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            let out = log_transform(&[a, b]).unwrap();
            if a <= b { prop_assert!(out[0] <= out[1]); } else { prop_assert!(out[0] >= out[1]); }
        }

        #[test]
        fn channel_norm_zero_mean_over_fit_set(rows in prop::collection::vec(prop::collection::vec(0.0f64..1e4, 5), 1..12)) {
            let train: Vec<Spectrum> = rows.into_iter().map(one).collect();
            let st = fit_channel_stats(&train).unwrap();
            let normed: Vec<Vec<f64>> = train.iter().map(|s| channel_normalize(&s.channels, &st).unwrap()).collect();
            for c in 0..5 {
                let m = normed.iter().map(|r| r[c]).sum::<f64>() / normed.len() as f64;
                prop_assert!(m.abs() < 1e-9);
            }
        }

        #[test]
        fn target_round_trip(vals in prop::collection::vec(0.0f64..100.0, 2..20), v in 0.0f64..100.0) {
            prop_assume!(vals.iter().any(|x| (x - vals[0]).abs() > 1e-6));
            let st = fit_target_norm(&vals).unwrap();
            let back = st.invert_target(st.apply_target(v).unwrap()).unwrap();
            let scale = v.abs() + st.target_mean.unwrap().abs();
            prop_assert!((back - v).abs() <= 1e-12 * scale);
        }
    }
}
