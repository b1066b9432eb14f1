//! Random search with successive halving over FNO and optimizer settings.
//!
//! Every trial's configuration is drawn up front from one master stream, so
//! trial `i` is the same whatever happens to the other trials. Trials that
//! survive a rung keep their training state and continue to the next rung.
//! Terminated trials are appended to a JSON-lines log; replaying that log
//! skips their training on a resumed run.

use crate::dataset::splitmix;
use crate::error::{Error, Result};
use crate::fno::{count_params, ActivationKind, FnoConfig, FnoParams, Variant};
use crate::train::{PROJECTION_HIDDEN, TrainConfig, TrainData, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// Consecutive rejected draws before a budget is declared infeasible.
pub const MAX_REJECTIONS: usize = 1000;
/// Default parameter budget of the constrained search.
pub const DEFAULT_BUDGET: usize = 500_000;
pub const BUDGET_LOW: f64 = 0.5;
pub const BUDGET_HIGH: f64 = 1.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Log-uniform learning rate bounds.
    pub lr: (f64, f64),
    /// Log-uniform weight decay bounds.
    pub weight_decay: (f64, f64),
    /// Uniform scheduler factor bounds.
    pub gamma: (f64, f64),
    pub widths: Vec<usize>,
    /// Inclusive ranges.
    pub depth: (usize, usize),
    pub modes: (usize, usize),
    pub padding: (usize, usize),
    pub activations: Vec<ActivationKind>,
    pub variants: Vec<Variant>,
}

impl SearchSpace {
    /// Bounds covering every preset.
    pub fn full() -> Self {
        Self {
            lr: (1e-4, 1e-2),
            weight_decay: (1e-5, 1e-2),
            gamma: (0.8, 1.0),
            widths: vec![32, 64, 96, 128, 192, 224, 256],
            depth: (2, 6),
            modes: (5, 48),
            padding: (0, 16),
            activations: ActivationKind::ALL.to_vec(),
            variants: vec![Variant::Classic, Variant::Mlp],
        }
    }

    /// Narrow widths and depths that train in seconds per epoch on one core.
    pub fn desk() -> Self {
        Self {
            widths: vec![8, 16, 24, 32],
            depth: (1, 3),
            modes: (4, 16),
            padding: (0, 8),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("search space: {what}")));
        let pos_range = |(a, b): (f64, f64)| a > 0.0 && a <= b && b.is_finite();
        if !pos_range(self.lr) || !pos_range(self.weight_decay) {
            return bad("log-uniform bounds must be positive and ordered");
        }
        if !(self.gamma.0 > 0.0 && self.gamma.0 <= self.gamma.1 && self.gamma.1 <= 1.0) {
            return bad("gamma bounds must lie in (0, 1]");
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.activations.is_empty() || self.variants.is_empty() {
            return bad("empty or zero choice list");
        }
        if self.depth.0 == 0 || self.depth.0 > self.depth.1 || self.modes.0 == 0 || self.modes.0 > self.modes.1 {
            return bad("depth and modes ranges must be positive and ordered");
        }
        if self.padding.0 > self.padding.1 {
            return bad("padding range must be ordered");
        }
        Ok(())
    }

    /// Whether a sampled configuration lies inside the space.
    pub fn contains(&self, c: &FnoConfig, t: &TrainConfig) -> bool {
        let within = |v: f64, (a, b): (f64, f64)| v >= a && v <= b;
        let within_u = |v: usize, (a, b): (usize, usize)| v >= a && v <= b;
        within(t.lr, self.lr)
            && within(t.weight_decay, self.weight_decay)
            && within(t.gamma, self.gamma)
            && self.widths.contains(&c.width)
            && within_u(c.depth, self.depth)
            && within_u(c.modes, self.modes)
            && within_u(c.padding, self.padding)
            && self.activations.contains(&c.activation)
            && self.variants.contains(&c.variant)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Mode {
    Constrained { budget: usize },
    Unconstrained,
}

impl Mode {
    /// Inclusive parameter-count window, if any.
    pub fn window(self) -> Option<(usize, usize)> {
        match self {
            Mode::Constrained { budget } => Some((
                (BUDGET_LOW * budget as f64).ceil() as usize,
                (BUDGET_HIGH * budget as f64).floor() as usize,
            )),
            Mode::Unconstrained => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Constrained { .. } => "constrained",
            Mode::Unconstrained => "unconstrained",
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a.ln()..=b.ln()).exp()
    }
}

/// Draws one configuration. In constrained mode draws are rejected until the
/// parameter count falls inside the budget window. `base` supplies the
/// settings that are not searched (epochs, batch size, betas, seed).
pub fn sample_config(
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
    mode: Mode,
    in_channels: usize,
    out_channels: usize,
    base: &TrainConfig,
) -> Result<(FnoConfig, TrainConfig)> {
    space.validate()?;
    for _ in 0..MAX_REJECTIONS {
        let train = TrainConfig {
            lr: log_uniform(rng, space.lr),
            weight_decay: log_uniform(rng, space.weight_decay),
            gamma: rng.gen_range(space.gamma.0..=space.gamma.1),
            ..base.clone()
        };
        let config = FnoConfig {
            in_channels,
            out_channels,
            width: *space.widths.choose(rng).unwrap(),
            depth: rng.gen_range(space.depth.0..=space.depth.1),
            modes: rng.gen_range(space.modes.0..=space.modes.1),
            activation: *space.activations.choose(rng).unwrap(),
            padding: rng.gen_range(space.padding.0..=space.padding.1),
            variant: *space.variants.choose(rng).unwrap(),
            projection_hidden: PROJECTION_HIDDEN,
        };
        match mode.window() {
            Some((lo, hi)) => {
                let p = count_params(&config);
                if p >= lo && p <= hi {
                    return Ok((config, train));
                }
            }
            None => return Ok((config, train)),
        }
    }
    match mode {
        Mode::Constrained { budget } => Err(Error::InfeasibleBudget(budget)),
        Mode::Unconstrained => unreachable!(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RungEntry {
    pub id: usize,
    /// NaN for failed trials, which are never promoted.
    pub val_l2: f64,
    pub params: usize,
}

/// Ids promoted out of a rung: the best `ceil(k / eta)` of the `k` entries by
/// validation loss, ties broken by parameter count and then id.
pub fn asha_promote(entries: &[RungEntry], eta: usize) -> Vec<usize> {
    let keep = entries.len().div_ceil(eta.max(1));
    let mut ok: Vec<&RungEntry> = entries.iter().filter(|e| e.val_l2.is_finite()).collect();
    ok.sort_by(|a, b| {
        a.val_l2
            .total_cmp(&b.val_l2)
            .then(a.params.cmp(&b.params))
            .then(a.id.cmp(&b.id))
    });
    ok.iter().take(keep).map(|e| e.id).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub id: usize,
    pub seed: u64,
    pub config: FnoConfig,
    pub train: TrainConfig,
    pub param_count: usize,
    /// Number of rungs completed.
    pub rung_reached: usize,
    pub rung_epochs: Vec<usize>,
    /// Validation relative L2 at the end of each completed rung.
    pub val_l2: Vec<f64>,
    /// Test relative L2 after the final rung, for trials that reached it.
    pub test_l2: Option<f64>,
    /// Kept out of the log so repeated searches write identical files.
    #[serde(skip)]
    pub wall_ms: f64,
    pub failure: Option<String>,
}

impl TrialResult {
    pub fn last_val(&self) -> f64 {
        self.val_l2.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub n_trials: usize,
    /// Cumulative epoch counts at which trials are compared.
    pub rungs: Vec<usize>,
    pub eta: usize,
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.n_trials == 0 || self.eta < 2 || self.batch_size == 0 {
            return Err(Error::Config("search needs trials, eta >= 2 and a batch size".into()));
        }
        if self.rungs.is_empty() || self.rungs[0] == 0 || self.rungs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "rungs must be positive and strictly increasing, got {:?}",
                self.rungs
            )));
        }
        Ok(())
    }

    /// All trial configurations in id order.
    pub fn draw(&self, in_channels: usize, out_channels: usize) -> Result<Vec<(u64, FnoConfig, TrainConfig)>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base = TrainConfig {
            epochs: *self.rungs.last().unwrap(),
            batch_size: self.batch_size,
            ..TrainConfig::default()
        };
        (0..self.n_trials)
            .map(|id| {
                let (c, mut t) = sample_config(&self.space, &mut rng, self.mode, in_channels, out_channels, &base)?;
                let seed = splitmix(self.seed ^ splitmix(id as u64 + 1));
                t.seed = seed;
                Ok((seed, c, t))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Every trial, in id order.
    pub trials: Vec<TrialResult>,
    /// Trials evaluated at each rung.
    pub per_rung: Vec<usize>,
    /// Trainings actually executed at each rung in this run (replayed trials
    /// are not counted).
    pub trained_per_rung: Vec<usize>,
    pub best: Option<usize>,
    /// Weights of the best trial after the full epoch budget. `None` when the
    /// best trial was replayed from the log.
    pub best_params: Option<FnoParams>,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> Option<&TrialResult> {
        self.best.map(|id| &self.trials[id])
    }

    /// Trials ranked by rung reached (descending) and last validation loss.
    pub fn leaderboard(&self) -> Vec<&TrialResult> {
        let mut v: Vec<&TrialResult> = self.trials.iter().collect();
        v.sort_by(|a, b| {
            b.rung_reached
                .cmp(&a.rung_reached)
                .then(a.last_val().is_nan().cmp(&b.last_val().is_nan()))
                .then(a.last_val().total_cmp(&b.last_val()))
                .then(a.id.cmp(&b.id))
        });
        v
    }

    pub fn leaderboard_csv(&self) -> String {
        let mut s = String::from(
            "rank,id,rung_reached,val_l2,test_l2,params,width,depth,modes,activation,padding,variant,lr,weight_decay,gamma,failure\n",
        );
        for (rank, t) in self.leaderboard().into_iter().enumerate() {
            let c = &t.config;
            let test = t.test_l2.map(|v| v.to_string()).unwrap_or_default();
            let act = serde_json::to_value(c.activation).unwrap();
            let var = serde_json::to_value(c.variant).unwrap();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                rank + 1,
                t.id,
                t.rung_reached,
                t.last_val(),
                test,
                t.param_count,
                c.width,
                c.depth,
                c.modes,
                act.as_str().unwrap_or_default(),
                c.padding,
                var.as_str().unwrap_or_default(),
                t.train.lr,
                t.train.weight_decay,
                t.train.gamma,
                t.failure.as_deref().unwrap_or_default().replace(',', ";"),
            );
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("id,wall_ms\n");
        for t in &self.trials {
            let _ = writeln!(s, "{},{:.3}", t.id, t.wall_ms);
        }
        s
    }
}

/// Reads a results log. A truncated last line (from an interrupted write) is
/// ignored.
pub fn read_log(path: &Path) -> Result<Vec<TrialResult>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::new();
    for (k, line) in lines.iter().enumerate() {
        match serde_json::from_str::<TrialResult>(line) {
            Ok(t) => out.push(t),
            Err(_) if k + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(Error::Format(format!("results log line {}: {e}", k + 1))),
        }
    }
    Ok(out)
}

struct Log<'p> {
    path: Option<&'p Path>,
}

impl Log<'_> {
    fn append(&self, t: &TrialResult) -> Result<()> {
        if let Some(p) = self.path {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            let mut line = serde_json::to_string(t)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

struct Live<'a> {
    trainer: Option<Trainer<'a>>,
    result: TrialResult,
}

/// Runs the search. With `log` set, trials already recorded there are
/// replayed instead of retrained, and newly terminated trials are appended.
/// The log is only valid for the same search configuration and data.
pub fn run_search(search: &SearchConfig, data: &TrainData, log: Option<&Path>) -> Result<SearchOutcome> {
    let in_ch = data.train_x.shape()[1];
    let out_ch = data.train_y.shape()[1];
    let drawn = search.draw(in_ch, out_ch)?;
    let logged: BTreeMap<usize, TrialResult> = match log {
        Some(p) => read_log(p)?.into_iter().map(|t| (t.id, t)).collect(),
        None => BTreeMap::new(),
    };
    for (id, t) in &logged {
        let matches = drawn
            .get(*id)
            .is_some_and(|(seed, c, tr)| *seed == t.seed && *c == t.config && *tr == t.train);
        if !matches {
            return Err(Error::Config(format!(
                "results log entry for trial {id} does not match this search"
            )));
        }
    }
    let writer = Log { path: log };

    let mut live: Vec<Live> = drawn
        .into_iter()
        .enumerate()
        .map(|(id, (seed, config, train))| Live {
            trainer: None,
            result: TrialResult {
                id,
                seed,
                param_count: count_params(&config),
                config,
                train,
                rung_reached: 0,
                rung_epochs: Vec::new(),
                val_l2: Vec::new(),
                test_l2: None,
                wall_ms: 0.0,
                failure: None,
            },
        })
        .collect();
    let mut active: Vec<usize> = (0..live.len()).collect();
    let mut per_rung = Vec::new();
    let mut trained_per_rung = Vec::new();
    let last = search.rungs.len() - 1;

    for (r, &epochs) in search.rungs.iter().enumerate() {
        per_rung.push(active.len());
        let to_train: Vec<usize> = active
            .iter()
            .copied()
            .filter(|id| logged.get(id).is_none_or(|t| t.val_l2.len() <= r))
            .collect();
        trained_per_rung.push(to_train.len());

        let mut slots: Vec<&mut Live> = live
            .iter_mut()
            .filter(|l| to_train.binary_search(&l.result.id).is_ok())
            .collect();
        slots.par_iter_mut().for_each(|slot| advance(slot, data, epochs, r == last));

        for &id in &active {
            if let Some(t) = logged.get(&id).filter(|t| t.val_l2.len() > r) {
                let res = &mut live[id].result;
                res.rung_reached = r + 1;
                res.rung_epochs = t.rung_epochs[..=r].to_vec();
                res.val_l2 = t.val_l2[..=r].to_vec();
                if r == last || t.rung_reached == r + 1 {
                    *res = t.clone();
                }
            }
        }

        let promoted = if r == last {
            Vec::new()
        } else {
            let entries: Vec<RungEntry> = active
                .iter()
                .map(|&id| {
                    let t = &live[id].result;
                    RungEntry {
                        id,
                        val_l2: if t.failure.is_some() { f64::NAN } else { t.last_val() },
                        params: t.param_count,
                    }
                })
                .collect();
            let mut p = asha_promote(&entries, search.eta);
            p.sort_unstable();
            p
        };
        for &id in &active {
            if promoted.binary_search(&id).is_err() {
                if r != last {
                    live[id].trainer = None;
                }
                if !logged.contains_key(&id) {
                    writer.append(&live[id].result)?;
                }
            }
        }
        active = promoted;
    }

    let finalists: Vec<&Live> = live
        .iter()
        .filter(|l| l.result.rung_reached == search.rungs.len() && l.result.failure.is_none())
        .collect();
    let best = finalists
        .iter()
        .min_by(|a, b| {
            a.result
                .last_val()
                .total_cmp(&b.result.last_val())
                .then(a.result.param_count.cmp(&b.result.param_count))
                .then(a.result.id.cmp(&b.result.id))
        })
        .map(|l| l.result.id);
    let best_params = best.and_then(|id| live[id].trainer.as_ref().map(|t| t.params().clone()));
    Ok(SearchOutcome {
        trials: live.into_iter().map(|l| l.result).collect(),
        per_rung,
        trained_per_rung,
        best,
        best_params,
    })
}

/// Trains one trial up to `epochs` total, recording the rung result.
fn advance<'a>(slot: &mut Live<'a>, data: &'a TrainData, epochs: usize, final_rung: bool) {
    let start = Instant::now();
    let res = &mut slot.result;
    if slot.trainer.is_none() {
        match Trainer::new(res.config.clone(), res.train.clone(), data) {
            Ok(t) => slot.trainer = Some(t),
            Err(e) => {
                res.failure = Some(e.to_string());
                return;
            }
        }
    }
    let trainer = slot.trainer.as_mut().unwrap();
    let outcome = trainer.run_until(epochs, |_| {});
    res.wall_ms += start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(()) => {
            let rec = trainer.history().epochs.last().expect("at least one epoch");
            res.rung_reached += 1;
            res.rung_epochs.push(epochs);
            res.val_l2.push(rec.val_l2);
            if final_rung {
                res.test_l2 = Some(rec.test_l2);
            }
        }
        Err(e) => {
            res.failure = Some(e.to_string());
            slot.trainer = None;
        }
    }
}
