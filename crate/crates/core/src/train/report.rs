//! Per-sample and per-channel error reports.

use super::metrics::{channel_errors, mean_defined, mean_std, unit_spacing, Norm};
use super::predict;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fno::Checkpoint;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Whether errors are measured on normalized or physical channel values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Normalized,
    Physical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub index: usize,
    pub subset: String,
    pub l1: f64,
    pub l2: f64,
    pub h1: f64,
    /// `None` where the truth channel has zero norm.
    pub channel_l2: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub space: Space,
    pub channels: Vec<String>,
    pub samples: Vec<SampleErrors>,
}

/// Errors of `pred` against `truth` (`[N, d, n]`). A sample's error is the
/// mean over its channels with nonzero truth norm; samples without any such
/// channel get zero if matched exactly and are otherwise left out of the
/// aggregates (reported as NaN).
pub fn evaluate_predictions(
    truth: &Tensor,
    pred: &Tensor,
    dt: f64,
    channels: Vec<String>,
    subsets: Vec<String>,
    space: Space,
) -> Result<EvalReport> {
    let per = |norm| channel_errors(truth, pred, norm, dt);
    let (l1, l2, h1) = (per(Norm::L1)?, per(Norm::L2)?, per(Norm::H1)?);
    let d = channels.len();
    if truth.shape()[truth.shape().len() - 2] != d || subsets.len() != l2.len() {
        return Err(Error::Contract("channel or subset labels do not match the data".into()));
    }
    let n = truth.last_dim();
    let exact = |s: usize| {
        let r = s * d * n..(s + 1) * d * n;
        truth.data()[r.clone()] == pred.data()[r]
    };
    let reduce = |row: &[Option<f64>], s: usize| {
        mean_defined(row).unwrap_or(if exact(s) { 0.0 } else { f64::NAN })
    };
    let samples = (0..l2.len())
        .map(|s| SampleErrors {
            index: s,
            subset: subsets[s].clone(),
            l1: reduce(&l1[s], s),
            l2: reduce(&l2[s], s),
            h1: reduce(&h1[s], s),
            channel_l2: l2[s].clone(),
        })
        .collect();
    Ok(EvalReport {
        space,
        channels,
        samples,
    })
}

/// Runs a checkpoint on every record of `ds`.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, space: Space) -> Result<EvalReport> {
    let meta = &ckpt.meta;
    if ds.n_points != meta.n_points || ds.t_end != meta.t_end || ds.model != meta.model {
        return Err(Error::Config(format!(
            "grid mismatch: checkpoint trained on {} with {} points over T = {}, data is {} with {} points over T = {}",
            meta.model, meta.n_points, meta.t_end, ds.model, ds.n_points, ds.t_end
        )));
    }
    let stats = &meta.normalization;
    let x = ds.inputs(stats, meta.coord_channel);
    let pred = predict(&meta.config, &ckpt.params, &x, meta.config.padding)?;
    let (truth, pred) = match space {
        Space::Normalized => (ds.targets(stats), pred),
        Space::Physical => (ds.physical_targets(), stats.denormalize(&pred)?),
    };
    let subsets = (0..ds.len()).map(|k| ds.subset_of(k).to_string()).collect();
    evaluate_predictions(&truth, &pred, unit_spacing(ds.n_points), ds.channels.clone(), subsets, space)
}

impl EvalReport {
    fn values(&self, norm: Norm) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| match norm {
                Norm::L1 => s.l1,
                Norm::L2 => s.l2,
                Norm::H1 => s.h1,
            })
            .filter(|v| !v.is_nan())
            .collect()
    }

    /// Mean and standard deviation over samples.
    pub fn aggregate(&self, norm: Norm) -> (f64, f64) {
        mean_std(&self.values(norm))
    }

    /// Mean relative L2 of each channel over samples where it is defined.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels.len())
            .map(|j| {
                let v: Vec<f64> = self.samples.iter().filter_map(|s| s.channel_l2[j]).collect();
                mean_std(&v).0
            })
            .collect()
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("index,subset,l1,l2,h1");
        for c in &self.channels {
            let _ = write!(s, ",l2_{c}");
        }
        s.push('\n');
        for r in &self.samples {
            let _ = write!(s, "{},{},{},{},{}", r.index, r.subset, r.l1, r.l2, r.h1);
            for e in &r.channel_l2 {
                match e {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn channels_csv(&self) -> String {
        let mut s = String::from("channel,mean_l2,std_l2,samples\n");
        for (j, c) in self.channels.iter().enumerate() {
            let v: Vec<f64> = self.samples.iter().filter_map(|r| r.channel_l2[j]).collect();
            let (m, sd) = mean_std(&v);
            let _ = writeln!(s, "{c},{m},{sd},{}", v.len());
        }
        s
    }

    /// `samples.csv` and `channels.csv` inside `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("samples.csv"), self.samples_csv())?;
        std::fs::write(dir.join("channels.csv"), self.channels_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_as_prediction_is_zero() {
        let t = Tensor::new(&[2, 2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 4.0, 5.0, 6.0, 1.0, 1.0, 1.0]).unwrap();
        let r = evaluate_predictions(&t, &t, 0.1, vec!["a".into(), "b".into()], vec!["x".into(); 2], Space::Physical)
            .unwrap();
        for norm in Norm::ALL {
            assert_eq!(r.aggregate(norm).0, 0.0);
        }
        assert_eq!(r.samples[0].channel_l2[1], None);
    }

    #[test]
    fn channel_means_average_to_aggregate() {
        let t = Tensor::new(&[2, 2, 2], vec![3.0, 4.0, 1.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let p = Tensor::new(&[2, 2, 2], vec![3.3, 4.4, 1.5, 0.0, 1.1, 0.9, 2.0, 1.0]).unwrap();
        let r = evaluate_predictions(&t, &p, 1.0, vec!["a".into(), "b".into()], vec!["x".into(); 2], Space::Normalized)
            .unwrap();
        let ch = r.channel_means();
        let agg = r.aggregate(Norm::L2).0;
        assert!(((ch[0] + ch[1]) / 2.0 - agg).abs() < 1e-12);
    }
}
