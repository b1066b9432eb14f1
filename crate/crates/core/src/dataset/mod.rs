//! Stimulus sampling plans, trajectory generation, normalization and the
//! binary dataset format.

mod io;

pub use crate::ionic::ModelId;
pub use io::{read_sidecar, sidecar_path, write_record_csv, DATASET_MAGIC, DATASET_VERSION};

use crate::error::{Error, Result};
use crate::ionic::{self, IonicModel, SolverOptions, StimulusProtocol};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown split tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// One row of a sampling table. A pinned range has `min == max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub name: String,
    pub amplitude: (f64, f64),
    pub duration: (f64, f64),
    pub count: usize,
}

impl Subset {
    fn new(name: &str, amplitude: (f64, f64), duration: (f64, f64), count: usize) -> Self {
        Self {
            name: name.to_string(),
            amplitude,
            duration,
            count,
        }
    }

    fn contains(&self, p: &StimulusProtocol) -> bool {
        let within = |x: f64, (lo, hi): (f64, f64)| x >= lo && x <= hi;
        within(p.amplitude, self.amplitude) && within(p.duration, self.duration)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub model: ModelId,
    pub split: Split,
    pub t_end: f64,
    pub subsets: Vec<Subset>,
}

impl SamplingPlan {
    pub fn total(&self) -> usize {
        self.subsets.iter().map(|s| s.count).sum()
    }

    /// Shrinks every subset count by `factor`, rounding half away from zero
    /// and keeping at least one record per subset.
    pub fn scaled(mut self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {factor}")));
        }
        for s in &mut self.subsets {
            s.count = ((s.count as f64 * factor).round() as usize).max(1);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.subsets {
            if s.count == 0 {
                return Err(Error::Config(format!("subset `{}` is empty", s.name)));
            }
            let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
            if !ok(s.amplitude) || !ok(s.duration) || s.amplitude.0 < 0.0 || s.duration.0 < 0.0 {
                return Err(Error::Config(format!("subset `{}` has an invalid range", s.name)));
            }
            if s.duration.1 > self.t_end {
                return Err(Error::Config(format!(
                    "subset `{}` stimulates past T = {}",
                    s.name, self.t_end
                )));
            }
        }
        Ok(())
    }
}

/// The reference sampling table for `model` and `split` at full scale.
/// Validation and test share one table.
pub fn build_plan(model: ModelId, split: Split) -> SamplingPlan {
    let train = split == Split::Train;
    let pick = |a: usize, b: usize| if train { a } else { b };
    let (t_end, subsets) = match model {
        ModelId::Fhn => {
            let mut s = vec![
                Subset::new("t0", (0.0, 0.0), (0.0, 0.0), pick(20, 10)),
                Subset::new("general", (0.1, 2.0), (0.01, 100.0), pick(2480, 285)),
                Subset::new("nap", (1e-4, 0.01), (0.01, 100.0), pick(500, 30)),
            ];
            if !train {
                s.push(Subset::new("t_fin", (0.3, 3.0), (100.0, 100.0), 50));
            }
            (100.0, s)
        }
        ModelId::Hh => (
            100.0,
            vec![
                Subset::new("t0", (0.0, 0.0), (0.0, 0.0), pick(20, 10)),
                Subset::new("general", (2.0, 10.0), (0.01, 100.0), pick(2380, 275)),
                Subset::new("nap", (1e-4, 2.0), (0.01, 100.0), pick(100, 30)),
                Subset::new("i_high", (50.0, 200.0), (0.01, 100.0), pick(300, 30)),
                Subset::new("t_fin", (2.0, 30.0), (100.0, 100.0), pick(200, 30)),
            ],
        ),
        ModelId::Ord => (
            500.0,
            vec![
                Subset::new("t0", (0.0, 0.0), (0.0, 0.0), pick(50, 15)),
                Subset::new("general", (0.0, 20.0), (2.0, 5.0), pick(2050, 270)),
                Subset::new("i_mid", (1.1, 10.0), (2.0, 10.0), pick(300, 30)),
                Subset::new("i_low", (0.0, 1.1), (0.0, 500.0), pick(300, 30)),
                Subset::new("t_fin", (0.7, 1.1), (500.0, 500.0), pick(300, 30)),
            ],
        ),
    };
    SamplingPlan {
        model,
        split,
        t_end,
        subsets,
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for record `index` of `split`.
pub fn record_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ split.tag() as u64) ^ index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Uniform draws per subset, concatenated in table order.
pub fn sample_protocols(plan: &SamplingPlan, seed: u64) -> Vec<StimulusProtocol> {
    let mut out = Vec::with_capacity(plan.total());
    for s in &plan.subsets {
        for _ in 0..s.count {
            let mut rng = record_rng(seed, plan.split, out.len());
            let amplitude = draw(&mut rng, s.amplitude);
            let duration = draw(&mut rng, s.duration);
            out.push(StimulusProtocol::new(amplitude, duration));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub protocol: StimulusProtocol,
    /// Channel-major `n_dim x n_points`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub model: ModelId,
    pub split: Split,
    pub t_end: f64,
    pub n_points: usize,
    pub channels: Vec<String>,
    pub subsets: Vec<Subset>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_dim(&self) -> usize {
        self.channels.len()
    }

    pub fn times(&self) -> Vec<f64> {
        ionic::uniform_grid(self.t_end, self.n_points)
    }

    pub fn dt(&self) -> f64 {
        self.t_end / (self.n_points - 1) as f64
    }

    pub fn stimulus(&self, k: usize) -> Vec<f64> {
        let p = &self.records[k].protocol;
        self.times().iter().map(|&t| ionic::stimulus(p, t)).collect()
    }

    pub fn channel(&self, k: usize, j: usize) -> &[f64] {
        &self.records[k].values[j * self.n_points..(j + 1) * self.n_points]
    }

    /// Name of the subset record `k` was drawn from.
    pub fn subset_of(&self, k: usize) -> &str {
        let mut end = 0;
        for s in &self.subsets {
            end += s.count;
            if k < end {
                return &s.name;
            }
        }
        ""
    }

    /// Structural checks shared by generation and loading.
    pub fn validate(&self) -> Result<()> {
        let declared: usize = self.subsets.iter().map(|s| s.count).sum();
        if declared != self.records.len() {
            return Err(Error::Format(format!(
                "subset counts sum to {declared} but {} records are present",
                self.records.len()
            )));
        }
        let width = self.n_dim() * self.n_points;
        let mut k = 0;
        for s in &self.subsets {
            for r in &self.records[k..k + s.count] {
                if r.values.len() != width {
                    return Err(Error::Format(format!("record {k} has the wrong length")));
                }
                if !s.contains(&r.protocol) {
                    return Err(Error::Format(format!(
                        "record {k} protocol (i = {}, T_stim = {}) outside subset `{}`",
                        r.protocol.amplitude, r.protocol.duration, s.name
                    )));
                }
                ionic::check_values(self.model, &r.values, self.n_points)
                    .map_err(|e| Error::Format(format!("record {k}: {e}")))?;
                k += 1;
            }
        }
        Ok(())
    }

    /// Network inputs `[N, C, n]`: normalized stimulus, then `t / T` when
    /// `coord` is set.
    pub fn inputs(&self, stats: &NormStats, coord: bool) -> Tensor {
        self.inputs_for(&(0..self.len()).collect::<Vec<_>>(), stats, coord)
    }

    pub fn inputs_for(&self, idx: &[usize], stats: &NormStats, coord: bool) -> Tensor {
        let n = self.n_points;
        let c = if coord { 2 } else { 1 };
        let times = self.times();
        let mut data = Vec::with_capacity(idx.len() * c * n);
        for &k in idx {
            let p = &self.records[k].protocol;
            data.extend(
                times
                    .iter()
                    .map(|&t| scale(ionic::stimulus(p, t), stats.input.0, stats.input.1)),
            );
            if coord {
                data.extend(times.iter().map(|t| t / self.t_end));
            }
        }
        Tensor::new(&[idx.len(), c, n], data).expect("shape matches data")
    }

    /// Normalized targets `[N, n_dim, n]`.
    pub fn targets(&self, stats: &NormStats) -> Tensor {
        self.targets_for(&(0..self.len()).collect::<Vec<_>>(), stats)
    }

    pub fn targets_for(&self, idx: &[usize], stats: &NormStats) -> Tensor {
        let n = self.n_points;
        let d = self.n_dim();
        let mut data = Vec::with_capacity(idx.len() * d * n);
        for &k in idx {
            for j in 0..d {
                let (lo, hi) = stats.outputs[j];
                data.extend(self.channel(k, j).iter().map(|&v| scale(v, lo, hi)));
            }
        }
        Tensor::new(&[idx.len(), d, n], data).expect("shape matches data")
    }

    /// Physical targets `[N, n_dim, n]`.
    pub fn physical_targets(&self) -> Tensor {
        let data = self.records.iter().flat_map(|r| r.values.iter().copied()).collect();
        Tensor::new(&[self.len(), self.n_dim(), self.n_points], data).expect("shape matches data")
    }
}

/// Trajectories for every protocol of `plan`, generated in parallel.
pub fn generate(plan: &SamplingPlan, seed: u64, n_points: usize, opts: &SolverOptions) -> Result<Dataset> {
    let model = IonicModel::default_for(plan.model)?;
    plan.validate()?;
    if (model.t_end() - plan.t_end).abs() > 0.0 {
        return Err(Error::Config(format!(
            "plan horizon {} differs from the model's {}",
            plan.t_end,
            model.t_end()
        )));
    }
    let protocols = sample_protocols(plan, seed);
    let results: Vec<Result<Record>> = protocols
        .par_iter()
        .map(|p| {
            ionic::solve(&model, p, n_points, opts).map(|t| Record {
                protocol: *p,
                values: t.values,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                return Err(Error::Generation {
                    index,
                    amplitude: protocols[index].amplitude,
                    duration: protocols[index].duration,
                    source: Box::new(e),
                })
            }
        }
    }
    let ds = Dataset {
        model: plan.model,
        split: plan.split,
        t_end: plan.t_end,
        n_points,
        channels: model.channel_names().iter().map(|s| s.to_string()).collect(),
        subsets: plan.subsets.clone(),
        records,
    };
    ds.validate()?;
    Ok(ds)
}

/// Affine map of `[lo, hi]` onto `[0, 1]`; a degenerate range maps to 0.5.
pub fn scale(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.5
    }
}

pub fn unscale(y: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + y * (hi - lo)
    } else {
        lo
    }
}

/// Per-channel `(min, max)` over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input: (f64, f64),
    pub outputs: Vec<(f64, f64)>,
}

impl NormStats {
    pub fn from_train(ds: &Dataset) -> Result<Self> {
        if ds.split != Split::Train {
            return Err(Error::Contract(format!(
                "normalization statistics must come from the training split, not {}",
                ds.split
            )));
        }
        if ds.is_empty() {
            return Err(Error::Contract("empty training split".into()));
        }
        let minmax = |it: &mut dyn Iterator<Item = f64>| {
            it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let input = minmax(&mut (0..ds.len()).flat_map(|k| ds.stimulus(k)));
        let outputs = (0..ds.n_dim())
            .map(|j| minmax(&mut (0..ds.len()).flat_map(|k| ds.channel(k, j).iter().copied())))
            .collect();
        Ok(Self { input, outputs })
    }

    /// Physical values of a normalized `[.., n_dim, n]` tensor.
    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        let shape = t.shape();
        let d = self.outputs.len();
        if shape.len() < 2 || shape[shape.len() - 2] != d {
            return Err(Error::Shape {
                op: "denormalize",
                detail: format!("expected [.., {d}, n], got {shape:?}"),
            });
        }
        let n = shape[shape.len() - 1];
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let (lo, hi) = self.outputs[(k / n) % d];
                unscale(v, lo, hi)
            })
            .collect();
        Tensor::new(shape, data)
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        let shape = t.shape();
        let d = self.outputs.len();
        if shape.len() < 2 || shape[shape.len() - 2] != d {
            return Err(Error::Shape {
                op: "normalize",
                detail: format!("expected [.., {d}, n], got {shape:?}"),
            });
        }
        let n = shape[shape.len() - 1];
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let (lo, hi) = self.outputs[(k / n) % d];
                scale(v, lo, hi)
            })
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fhn_train_plan_matches_table() {
        let p = build_plan(ModelId::Fhn, Split::Train);
        let counts: Vec<_> = p.subsets.iter().map(|s| (s.name.as_str(), s.count)).collect();
        assert_eq!(counts, [("t0", 20), ("general", 2480), ("nap", 500)]);
        assert_eq!(p.subsets[1].amplitude, (0.1, 2.0));
        assert_eq!(p.subsets[1].duration, (0.01, 100.0));
        assert_eq!(p.subsets[2].amplitude, (1e-4, 0.01));
        assert_eq!(p.total(), 3000);
    }

    #[test]
    fn fhn_test_plan_has_t_fin() {
        let p = build_plan(ModelId::Fhn, Split::Test);
        let t_fin = p.subsets.iter().find(|s| s.name == "t_fin").unwrap();
        assert_eq!(t_fin.count, 50);
        assert_eq!(t_fin.amplitude, (0.3, 3.0));
        assert_eq!(t_fin.duration, (100.0, 100.0));
        assert_eq!(p.total(), 375);
    }

    #[test]
    fn hh_plans_match_table() {
        let p = build_plan(ModelId::Hh, Split::Train);
        let counts: Vec<_> = p.subsets.iter().map(|s| s.count).collect();
        assert_eq!(counts, [20, 2380, 100, 300, 200]);
        assert_eq!(p.subsets[1].amplitude, (2.0, 10.0));
        assert_eq!(p.subsets[3].amplitude, (50.0, 200.0));
        assert_eq!(p.subsets[4].duration, (100.0, 100.0));
        assert_eq!(build_plan(ModelId::Hh, Split::Val).total(), 375);
    }

    #[test]
    fn ord_plan_is_representable() {
        let p = build_plan(ModelId::Ord, Split::Train);
        assert_eq!(p.total(), 3000);
        assert_eq!(build_plan(ModelId::Ord, Split::Test).total(), 375);
        p.validate().unwrap();
    }

    #[test]
    fn desk_scale_counts() {
        for model in [ModelId::Fhn, ModelId::Hh] {
            let train = build_plan(model, Split::Train).scaled(0.1).unwrap();
            assert_eq!(train.total(), 300);
            for split in [Split::Val, Split::Test] {
                assert_eq!(build_plan(model, split).scaled(0.1).unwrap().total(), 38);
            }
        }
    }

    #[test]
    fn protocols_are_deterministic_and_in_range() {
        let plan = build_plan(ModelId::Hh, Split::Train).scaled(0.05).unwrap();
        let a = sample_protocols(&plan, 3);
        assert_eq!(a, sample_protocols(&plan, 3));
        assert_ne!(a, sample_protocols(&plan, 4));
        let mut k = 0;
        for s in &plan.subsets {
            for p in &a[k..k + s.count] {
                assert!(s.contains(p));
                if s.name == "t0" {
                    assert_eq!(p.duration, 0.0);
                }
            }
            k += s.count;
        }
    }

    #[test]
    fn splits_draw_different_protocols() {
        let val = sample_protocols(&build_plan(ModelId::Fhn, Split::Val), 1);
        let test = sample_protocols(&build_plan(ModelId::Fhn, Split::Test), 1);
        let general = |v: &[StimulusProtocol]| v[10..295].to_vec();
        assert!(general(&val).iter().all(|p| !general(&test).contains(p)));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(scale(-12.0, -12.0, 115.0), 0.0);
        assert_eq!(scale(115.0, -12.0, 115.0), 1.0);
        assert_eq!(scale(3.0, 2.0, 2.0), 0.5);
        let x = 0.123456789;
        assert!((unscale(scale(x, -1.3, 7.9), -1.3, 7.9) - x).abs() < 1e-12);
    }

    #[test]
    fn ord_generation_is_rejected() {
        let plan = build_plan(ModelId::Ord, Split::Train).scaled(0.001).unwrap();
        assert!(matches!(
            generate(&plan, 0, 16, &SolverOptions::default()),
            Err(Error::NotImplemented(_))
        ));
    }
}
