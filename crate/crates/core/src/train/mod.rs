//! Losses, the optimizer, the training loop and evaluation.

mod metrics;
mod optim;
mod presets;
mod report;

pub use metrics::{
    channel_error, channel_errors, derivative, mean_defined, mean_std, relative_l2_loss, relative_metric, unit_spacing,
    Norm,
};
pub use optim::AdamW;
pub use presets::{state_dim, Preset, PRESETS, PROJECTION_HIDDEN};
pub use report::{evaluate, evaluate_predictions, EvalReport, SampleErrors, Space};

use crate::dataset::{splitmix, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::fno::{forward_graph, FnoConfig, FnoParams};
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Samples per independent graph inside a mini-batch. Fixed so results do
/// not depend on the thread count.
pub const CHUNK: usize = 8;

/// Relative weight of the batch RMS channel norm added to each loss
/// denominator.
pub const LOSS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning-rate decay factor applied every `period` epochs.
    pub gamma: f64,
    pub period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            gamma: 0.9,
            period: 10,
            epochs: 1000,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.period == 0 {
            return Err(Error::Config("batch size and scheduler period must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `lr * gamma^floor(epoch / period)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr * config.gamma.powi((epoch / config.period) as i32)
}

/// Normalized tensors for the three splits.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train_x: Tensor,
    pub train_y: Tensor,
    pub val_x: Tensor,
    pub val_y: Tensor,
    pub test_x: Tensor,
    pub test_y: Tensor,
    /// Grid spacing in normalized time, for H1 derivatives.
    pub dt: f64,
}

impl TrainData {
    pub fn from_datasets(train: &Dataset, val: &Dataset, test: &Dataset, stats: &NormStats, coord: bool) -> Result<Self> {
        for other in [val, test] {
            if other.model != train.model || other.n_points != train.n_points || other.t_end != train.t_end {
                return Err(Error::Config(format!(
                    "{} split does not share the training grid or model",
                    other.split
                )));
            }
        }
        Ok(Self {
            train_x: train.inputs(stats, coord),
            train_y: train.targets(stats),
            val_x: val.inputs(stats, coord),
            val_y: val.targets(stats),
            test_x: test.inputs(stats, coord),
            test_y: test.targets(stats),
            dt: unit_spacing(train.n_points),
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_x.shape()[0]
    }
}

/// Rows `idx` of a `[N, ...]` tensor.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut shape = t.shape().to_vec();
    let row: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &k in idx {
        data.extend_from_slice(&t.data()[k * row..(k + 1) * row]);
    }
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("shape matches data")
}

/// Batched inference on `[N, C, n]`, evaluated in fixed-size chunks.
pub fn predict(config: &FnoConfig, params: &FnoParams, inputs: &Tensor, padding: usize) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Result<Tensor>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            let g = Graph::new();
            let w = params.constants(&g);
            let x = g.constant(gather(inputs, &idx));
            let out = forward_graph(config, &w, x, padding)?;
            let v = out.value().clone();
            Ok(v)
        })
        .collect();
    let mut data = Vec::new();
    let mut shape = None;
    for p in parts {
        let p = p?;
        shape.get_or_insert_with(|| p.shape().to_vec());
        data.extend(p.into_data());
    }
    let mut shape = shape.unwrap_or_else(|| vec![0, config.out_channels, inputs.last_dim()]);
    shape[0] = n;
    Tensor::new(&shape, data)
}

/// Loss denominators for a `[B, d, n]` batch: each row's norm plus
/// [`LOSS_EPS`] times the RMS over the batch of that channel's norms. A
/// channel that is zero across the whole batch falls back to absolute error.
pub fn loss_denominators(y: &Tensor) -> Vec<f64> {
    let s = y.shape();
    let (b, d, n) = (s[0], s[1], s[2]);
    let norms: Vec<f64> = y
        .data()
        .chunks_exact(n)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let rms: Vec<f64> = (0..d)
        .map(|j| ((0..b).map(|i| norms[i * d + j].powi(2)).sum::<f64>() / b as f64).sqrt())
        .collect();
    norms
        .iter()
        .enumerate()
        .map(|(r, &nr)| {
            let den = nr + LOSS_EPS * rms[r % d];
            if den > 0.0 {
                den
            } else {
                1.0
            }
        })
        .collect()
}

/// Loss of one mini-batch and its gradient, in `params.iter()` order.
pub fn batch_loss_and_grads(config: &FnoConfig, params: &FnoParams, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let b = x.shape()[0];
    let denoms = loss_denominators(y);
    let rows = y.shape()[1];
    let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
    let parts: Vec<Result<(f64, Vec<Tensor>)>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(b)).collect();
            let g = Graph::new();
            let w = params.leaves(&g);
            let xin = g.constant(gather(x, &idx));
            let out = forward_graph(config, &w, xin, config.padding)?;
            let den = denoms[s * rows..(s + idx.len()) * rows].to_vec();
            let loss = out
                .relative_l2(gather(y, &idx), den)?
                .scale(idx.len() as f64 / b as f64);
            let value = loss.value().item()?;
            let mut grads = g.backward(loss)?;
            let gs = w
                .iter()
                .into_iter()
                .map(|v| grads.take(*v).expect("every leaf receives a gradient"))
                .collect();
            Ok((value, gs))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for p in parts {
        let (l, gs) = p?;
        total += l;
        match &mut acc {
            None => acc = Some(gs),
            Some(a) => {
                for (t, g) in a.iter_mut().zip(gs) {
                    for (u, v) in t.data_mut().iter_mut().zip(g.data()) {
                        *u += v;
                    }
                }
            }
        }
    }
    Ok((total, acc.unwrap_or_default()))
}

/// Per-sample relative errors, skipping zero-norm truth channels. Samples
/// with no usable channel are dropped from the mean.
fn lenient_mean(truth: &Tensor, pred: &Tensor, norm: Norm, dt: f64) -> Result<f64> {
    let per: Vec<f64> = channel_errors(truth, pred, norm, dt)?
        .iter()
        .filter_map(|r| mean_defined(r))
        .collect();
    Ok(mean_std(&per).0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l2: f64,
    pub val_l2: f64,
    pub test_l1: f64,
    pub test_l2: f64,
    pub test_h1: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Test relative L2 per output channel after the last epoch.
    pub final_channel_l2: Vec<f64>,
}

/// Columns of the history CSV. Wall times go to a separate timing CSV so the
/// history itself is reproducible byte for byte.
pub const HISTORY_HEADER: &str = "epoch,train_l2,val_l2,test_l1,test_l2,test_h1,lr";
pub const TIMING_HEADER: &str = "epoch,wall_ms";

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_l2).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.train_l2, e.val_l2, e.test_l1, e.test_l2, e.test_h1, e.lr
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from(TIMING_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s += &format!("{},{:.3}\n", e.epoch, e.wall_ms);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().trim();
        if header != HISTORY_HEADER {
            return Err(Error::Format(format!("unexpected history header `{header}`")));
        }
        let mut epochs = Vec::new();
        for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("history row {} has {} fields", k + 1, f.len())));
            }
            let num = |i: usize| {
                f[i].trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number `{}` in history row {}", f[i], k + 1)))
            };
            epochs.push(EpochRecord {
                epoch: num(0)? as usize,
                train_l2: num(1)?,
                val_l2: num(2)?,
                test_l1: num(3)?,
                test_l2: num(4)?,
                test_h1: num(5)?,
                lr: num(6)?,
                wall_ms: 0.0,
            });
        }
        Ok(Self {
            epochs,
            final_channel_l2: Vec::new(),
        })
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: FnoParams,
    pub best_params: FnoParams,
    pub best_epoch: usize,
    pub best_val_l2: f64,
    pub history: History,
}

/// Resumable training state. Shuffling and the learning rate depend only on
/// the absolute epoch, so stopping and continuing reproduces an
/// uninterrupted run exactly.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    pub config: FnoConfig,
    pub train: TrainConfig,
    data: &'a TrainData,
    params: FnoParams,
    opt: AdamW,
    epoch: usize,
    history: History,
    best: Option<(usize, f64, FnoParams)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: FnoConfig, train: TrainConfig, data: &'a TrainData) -> Result<Self> {
        let params = crate::fno::init(&config, train.seed)?;
        Self::with_params(config, train, data, params)
    }

    pub fn with_params(config: FnoConfig, train: TrainConfig, data: &'a TrainData, params: FnoParams) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        let n = data.train_x.last_dim();
        config.check_grid(n, config.padding)?;
        if data.train_x.shape()[1] != config.in_channels || data.train_y.shape()[1] != config.out_channels {
            return Err(Error::Config(format!(
                "network expects {} -> {} channels, data has {} -> {}",
                config.in_channels,
                config.out_channels,
                data.train_x.shape()[1],
                data.train_y.shape()[1]
            )));
        }
        if data.n_train() == 0 {
            return Err(Error::Config("empty training split".into()));
        }
        let opt = AdamW::new(&params, train.beta1, train.beta2, train.eps, train.weight_decay);
        Ok(Self {
            config,
            train,
            data,
            params,
            opt,
            epoch: 0,
            history: History::default(),
            best: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &FnoParams {
        &self.params
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn best_val(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.1)
    }

    fn shuffled(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.n_train()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.train.seed) ^ splitmix(self.epoch as u64 + 1));
        idx.shuffle(&mut rng);
        idx
    }

    /// One pass over the training split followed by validation and test
    /// evaluation.
    pub fn step_epoch(&mut self) -> Result<&EpochRecord> {
        let start = Instant::now();
        let lr = lr_at(self.epoch, &self.train);
        let order = self.shuffled();
        let snapshot = self.params.clone();
        let diverged = |batch: usize| Error::Diverged {
            epoch: self.epoch,
            batch,
            last_good: Some(Box::new(snapshot.clone())),
        };
        let mut weighted = 0.0;
        for (batch, idx) in order.chunks(self.train.batch_size).enumerate() {
            let x = gather(&self.data.train_x, idx);
            let y = gather(&self.data.train_y, idx);
            let (loss, grads) = match batch_loss_and_grads(&self.config, &self.params, &x, &y) {
                Ok(r) => r,
                Err(Error::NumericFailure { .. }) => return Err(diverged(batch)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(batch));
            }
            if let Err(Error::Optimizer(_)) = self.opt.step(&mut self.params, &grads, lr) {
                return Err(diverged(batch));
            }
            weighted += loss * idx.len() as f64;
        }
        let train_l2 = weighted / order.len() as f64;

        let eval = |x: &Tensor| predict(&self.config, &self.params, x, self.config.padding);
        let (val_pred, test_pred) = match (eval(&self.data.val_x), eval(&self.data.test_x)) {
            (Ok(v), Ok(t)) => (v, t),
            (Err(Error::NumericFailure { .. }), _) | (_, Err(Error::NumericFailure { .. })) => {
                return Err(diverged(order.len().div_ceil(self.train.batch_size)))
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let dt = self.data.dt;
        let val_l2 = lenient_mean(&self.data.val_y, &val_pred, Norm::L2, dt)?;
        let test_l1 = lenient_mean(&self.data.test_y, &test_pred, Norm::L1, dt)?;
        let test_l2 = lenient_mean(&self.data.test_y, &test_pred, Norm::L2, dt)?;
        let test_h1 = lenient_mean(&self.data.test_y, &test_pred, Norm::H1, dt)?;

        if self.best.as_ref().is_none_or(|b| val_l2 < b.1) {
            self.best = Some((self.epoch, val_l2, self.params.clone()));
        }
        let errs = channel_errors(&self.data.test_y, &test_pred, Norm::L2, dt)?;
        self.history.final_channel_l2 = (0..self.config.out_channels)
            .map(|j| {
                let v: Vec<f64> = errs.iter().filter_map(|r| r[j]).collect();
                mean_std(&v).0
            })
            .collect();
        self.history.epochs.push(EpochRecord {
            epoch: self.epoch,
            train_l2,
            val_l2,
            test_l1,
            test_l2,
            test_h1,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        self.epoch += 1;
        Ok(self.history.epochs.last().unwrap())
    }

    /// Trains until `epochs` epochs have completed in total.
    pub fn run_until(&mut self, epochs: usize, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epoch < epochs {
            let rec = self.step_epoch()?;
            on_epoch(rec);
        }
        Ok(())
    }

    pub fn finish(self) -> FitResult {
        let (best_epoch, best_val_l2, best_params) = self
            .best
            .unwrap_or_else(|| (0, f64::NAN, self.params.clone()));
        FitResult {
            params: self.params,
            best_params,
            best_epoch,
            best_val_l2,
            history: self.history,
        }
    }
}

/// Trains a freshly initialized network for `train.epochs` epochs.
pub fn fit(config: &FnoConfig, data: &TrainData, train: &TrainConfig) -> Result<FitResult> {
    let mut t = Trainer::new(config.clone(), train.clone(), data)?;
    t.run_until(train.epochs, |_| {})?;
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_every_period() {
        let c = TrainConfig {
            lr: 1e-3,
            gamma: 0.9,
            ..TrainConfig::default()
        };
        assert!((lr_at(25, &c) - 8.1e-4).abs() < 1e-15);
        for e in 0..10 {
            assert_eq!(lr_at(e, &c), 1e-3);
        }
        let flat = TrainConfig { gamma: 1.0, ..c };
        assert_eq!(lr_at(997, &flat), 1e-3);
    }

    #[test]
    fn denominators_add_scaled_rms() {
        let y = Tensor::new(&[2, 1, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let d = loss_denominators(&y);
        let rms = (25.0f64 / 2.0).sqrt();
        assert_eq!(d[0], 5.0 + LOSS_EPS * rms);
        assert_eq!(d[1], LOSS_EPS * rms);
        let zero = Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(loss_denominators(&zero), vec![1.0]);
    }

    #[test]
    fn history_csv_round_trip() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 0,
                train_l2: 0.5,
                val_l2: 0.25,
                test_l1: 0.125,
                test_l2: 0.3,
                test_h1: 1.5,
                lr: 1e-3,
                wall_ms: 0.0,
            }],
            final_channel_l2: vec![],
        };
        assert_eq!(History::from_csv(&h.to_csv()).unwrap(), h);
        assert_eq!(h.timing_csv(), "epoch,wall_ms\n0,0.000\n");
        assert!(History::from_csv("epoch,loss\n").is_err());
    }

    #[test]
    fn gather_rows() {
        let t = Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(gather(&t, &[2, 0]).data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
