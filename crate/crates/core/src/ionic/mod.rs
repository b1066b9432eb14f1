//! FitzHugh-Nagumo and Hodgkin-Huxley membrane models driven by a
//! piecewise-constant stimulus, and trajectory generation on a uniform grid.

mod solver;

pub use solver::{integrate, integrate_fixed, SolverOptions, SolverStats};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which ionic model a dataset or checkpoint refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Fhn,
    Hh,
    /// O'Hara-Rudy. Plans and presets are representable, simulation is not.
    Ord,
}

impl ModelId {
    pub fn tag(self) -> u8 {
        match self {
            ModelId::Fhn => 0,
            ModelId::Hh => 1,
            ModelId::Ord => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelId::Fhn),
            1 => Ok(ModelId::Hh),
            2 => Ok(ModelId::Ord),
            t => Err(Error::Format(format!("unknown model tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelId::Fhn => "fhn",
            ModelId::Hh => "hh",
            ModelId::Ord => "ord",
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fhn" => Ok(ModelId::Fhn),
            "hh" => Ok(ModelId::Hh),
            "ord" => Ok(ModelId::Ord),
            _ => Err(Error::Config(format!("unknown model `{s}` (expected fhn, hh or ord)"))),
        }
    }
}

/// Current of amplitude `amplitude` applied on `[0, duration]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusProtocol {
    pub amplitude: f64,
    pub duration: f64,
}

impl StimulusProtocol {
    pub fn new(amplitude: f64, duration: f64) -> Self {
        Self {
            amplitude,
            duration,
        }
    }

    pub fn validate(&self, t_end: f64) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "stimulus amplitude must be finite and >= 0, got {}",
                self.amplitude
            )));
        }
        if !(0.0..=t_end).contains(&self.duration) {
            return Err(Error::Config(format!(
                "stimulus duration {} outside [0, {t_end}]",
                self.duration
            )));
        }
        Ok(())
    }
}

pub fn stimulus(protocol: &StimulusProtocol, t: f64) -> f64 {
    if t <= protocol.duration {
        protocol.amplitude
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FhnParams {
    pub b: f64,
    pub beta: f64,
    pub c: f64,
    pub delta: f64,
    pub gamma: f64,
    pub e: f64,
    pub t_end: f64,
    pub v0: f64,
    pub w0: f64,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self {
            b: 5.0,
            beta: 0.1,
            c: 1.0,
            delta: 1.0,
            gamma: 0.25,
            e: 1.0,
            t_end: 100.0,
            v0: 0.0,
            w0: 0.0,
        }
    }
}

impl FhnParams {
    pub fn rhs(&self, y: &[f64], current: f64, dy: &mut [f64]) {
        let (v, w) = (y[0], y[1]);
        dy[0] = self.b * v * (v - self.beta) * (self.delta - v) - self.c * w + current;
        dy[1] = self.e * (v - self.gamma * w);
    }
}

pub fn fhn_rhs(state: [f64; 2], t: f64, protocol: &StimulusProtocol, params: &FhnParams) -> [f64; 2] {
    let mut dy = [0.0; 2];
    params.rhs(&state, stimulus(protocol, t), &mut dy);
    dy
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HhParams {
    pub cm: f64,
    pub g_na: f64,
    pub g_k: f64,
    pub g_l: f64,
    pub v_na: f64,
    pub v_k: f64,
    pub v_l: f64,
    pub t_end: f64,
    pub v0: f64,
    pub m0: f64,
    pub h0: f64,
    pub n0: f64,
}

impl Default for HhParams {
    fn default() -> Self {
        Self {
            cm: 1.0,
            g_na: 120.0,
            g_k: 36.0,
            g_l: 0.3,
            v_na: 115.0,
            v_k: -12.0,
            v_l: 10.6,
            t_end: 100.0,
            v0: 2.757e-2,
            m0: 5.2934e-2,
            h0: 5.9611e-1,
            n0: 3.1768e-1,
        }
    }
}

/// `u / (exp(u) - 1)`, equal to 1 at `u = 0`.
fn x_over_expm1(u: f64) -> f64 {
    if u.abs() < 1e-9 {
        1.0 - 0.5 * u
    } else {
        u / u.exp_m1()
    }
}

pub fn alpha_m(v: f64) -> f64 {
    x_over_expm1((25.0 - v) / 10.0)
}

pub fn beta_m(v: f64) -> f64 {
    4.0 * (-v / 18.0).exp()
}

pub fn alpha_h(v: f64) -> f64 {
    0.07 * (-v / 20.0).exp()
}

pub fn beta_h(v: f64) -> f64 {
    1.0 / (((30.0 - v) / 10.0).exp() + 1.0)
}

pub fn alpha_n(v: f64) -> f64 {
    0.1 * x_over_expm1((10.0 - v) / 10.0)
}

pub fn beta_n(v: f64) -> f64 {
    0.125 * (-v / 80.0).exp()
}

impl HhParams {
    pub fn rhs(&self, y: &[f64], current: f64, dy: &mut [f64]) {
        let (v, m, h, n) = (y[0], y[1], y[2], y[3]);
        let i_na = self.g_na * m * m * m * h * (v - self.v_na);
        let i_k = self.g_k * n.powi(4) * (v - self.v_k);
        let i_l = self.g_l * (v - self.v_l);
        dy[0] = (current - i_na - i_k - i_l) / self.cm;
        dy[1] = alpha_m(v) * (1.0 - m) - beta_m(v) * m;
        dy[2] = alpha_h(v) * (1.0 - h) - beta_h(v) * h;
        dy[3] = alpha_n(v) * (1.0 - n) - beta_n(v) * n;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_na > 0.0 && self.g_k > 0.0 && self.g_l > 0.0) {
            return Err(Error::Config("HH conductances must be positive".into()));
        }
        if [self.m0, self.h0, self.n0].iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Config("HH gating initial values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn hh_rhs(state: [f64; 4], t: f64, protocol: &StimulusProtocol, params: &HhParams) -> [f64; 4] {
    let mut dy = [0.0; 4];
    params.rhs(&state, stimulus(protocol, t), &mut dy);
    dy
}

/// A simulable ionic model with its parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum IonicModel {
    Fhn(FhnParams),
    Hh(HhParams),
}

pub const FHN_CHANNELS: [&str; 2] = ["V", "w"];
pub const HH_CHANNELS: [&str; 4] = ["V", "m", "h", "n"];

/// Tolerance on the `[0, 1]` bounds of HH gating variables.
pub const GATING_SLACK: f64 = 1e-6;

impl IonicModel {
    pub fn default_for(id: ModelId) -> Result<Self> {
        match id {
            ModelId::Fhn => Ok(IonicModel::Fhn(FhnParams::default())),
            ModelId::Hh => Ok(IonicModel::Hh(HhParams::default())),
            ModelId::Ord => Err(Error::NotImplemented(
                "simulation of the O'Hara-Rudy model is not implemented; \
                 only externally generated ORd data can be described"
                    .into(),
            )),
        }
    }

    pub fn id(&self) -> ModelId {
        match self {
            IonicModel::Fhn(_) => ModelId::Fhn,
            IonicModel::Hh(_) => ModelId::Hh,
        }
    }

    pub fn channel_names(&self) -> &'static [&'static str] {
        match self {
            IonicModel::Fhn(_) => &FHN_CHANNELS,
            IonicModel::Hh(_) => &HH_CHANNELS,
        }
    }

    pub fn dim(&self) -> usize {
        self.channel_names().len()
    }

    pub fn t_end(&self) -> f64 {
        match self {
            IonicModel::Fhn(p) => p.t_end,
            IonicModel::Hh(p) => p.t_end,
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match self {
            IonicModel::Fhn(p) => vec![p.v0, p.w0],
            IonicModel::Hh(p) => vec![p.v0, p.m0, p.h0, p.n0],
        }
    }

    pub fn rhs(&self, y: &[f64], current: f64, dy: &mut [f64]) {
        match self {
            IonicModel::Fhn(p) => p.rhs(y, current, dy),
            IonicModel::Hh(p) => p.rhs(y, current, dy),
        }
    }
}

/// `n` equispaced times covering `[0, t_end]` including both ends.
pub fn uniform_grid(t_end: f64, n: usize) -> Vec<f64> {
    let dt = t_end / (n - 1) as f64;
    (0..n).map(|k| if k + 1 == n { t_end } else { k as f64 * dt }).collect()
}

/// A solution sampled on a uniform grid. `values` is channel-major:
/// channel `j` occupies `values[j * n .. (j + 1) * n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub model: ModelId,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub stimulus: Vec<f64>,
}

impl Trajectory {
    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn n_channels(&self) -> usize {
        self.values.len() / self.times.len()
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        let n = self.n_points();
        &self.values[j * n..(j + 1) * n]
    }

    /// Finiteness everywhere, gating variables within `[0, 1]` up to
    /// [`GATING_SLACK`] for HH.
    pub fn validate(&self) -> Result<()> {
        check_values(self.model, &self.values, self.n_points())
    }
}

pub(crate) fn check_values(model: ModelId, values: &[f64], n: usize) -> Result<()> {
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "non-finite value in channel {} at point {}",
            k / n,
            k % n
        )));
    }
    if model == ModelId::Hh {
        for j in 1..4 {
            let ch = &values[j * n..(j + 1) * n];
            if let Some(k) = ch
                .iter()
                .position(|g| *g < -GATING_SLACK || *g > 1.0 + GATING_SLACK)
            {
                return Err(Error::Format(format!(
                    "gating channel {} = {} at point {k} leaves [0, 1]",
                    HH_CHANNELS[j], ch[k]
                )));
            }
        }
    }
    Ok(())
}

/// Integrates `model` under `protocol` and samples the state on
/// `n_points` uniform times in `[0, T]`. The end of the stimulus is a
/// breakpoint: each constant-current segment is integrated separately.
pub fn solve(
    model: &IonicModel,
    protocol: &StimulusProtocol,
    n_points: usize,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    if n_points < 2 {
        return Err(Error::InvalidLength(format!(
            "a trajectory needs at least 2 points, got {n_points}"
        )));
    }
    let t_end = model.t_end();
    protocol.validate(t_end)?;
    let times = uniform_grid(t_end, n_points);
    let dim = model.dim();

    let split = protocol.duration.min(t_end);
    let segments = [(0.0, split, protocol.amplitude), (split, t_end, 0.0)];

    let mut y = model.initial_state();
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n_points);
    let mut next = 0;
    for (a, b, current) in segments {
        let end = if b >= t_end {
            n_points
        } else {
            next + times[next..].iter().take_while(|&&t| t <= b).count()
        };
        let wanted = &times[next..end];
        if b > a {
            let (ys, y_end, _) =
                integrate(|_, s, ds| model.rhs(s, current, ds), &y, a, b, wanted, opts)?;
            samples.extend(ys);
            y = y_end;
        } else {
            samples.extend(wanted.iter().map(|_| y.clone()));
        }
        next = end;
    }

    let mut values = vec![0.0; dim * n_points];
    for (k, s) in samples.iter().enumerate() {
        for j in 0..dim {
            values[j * n_points + k] = s[j];
        }
    }
    let stim = times.iter().map(|&t| stimulus(protocol, t)).collect();
    let traj = Trajectory {
        model: model.id(),
        times,
        values,
        stimulus: stim,
    };
    if let Some(k) = traj.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Stiffness {
            t: traj.times[k % n_points],
        });
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stimulus_definition() {
        let p = StimulusProtocol::new(2.0, 50.0);
        assert_eq!(stimulus(&p, 10.0), 2.0);
        assert_eq!(stimulus(&p, 60.0), 0.0);
        let z = StimulusProtocol::new(3.0, 0.0);
        assert_eq!(stimulus(&z, 0.0), 3.0);
        assert_eq!(stimulus(&z, 1e-9), 0.0);
    }

    #[test]
    fn fhn_hand_values() {
        let p = FhnParams::default();
        let off = StimulusProtocol::new(0.0, 0.0);
        assert_eq!(fhn_rhs([0.0, 0.0], 0.0, &off, &p), [0.0, 0.0]);
        let d = fhn_rhs([0.5, 0.0], 0.0, &off, &p);
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert_eq!(fhn_rhs([1.0, 0.0], 0.0, &off, &p), [0.0, 1.0]);
    }

    #[test]
    fn hh_gating_boundaries() {
        let p = HhParams::default();
        let off = StimulusProtocol::new(0.0, 0.0);
        for v in [-10.0, 0.0, 10.0, 25.0, 60.0] {
            let d0 = hh_rhs([v, 0.0, 0.0, 0.0], 0.0, &off, &p);
            assert_eq!(d0[1], alpha_m(v));
            assert_eq!(d0[2], alpha_h(v));
            assert_eq!(d0[3], alpha_n(v));
            let d1 = hh_rhs([v, 1.0, 1.0, 1.0], 0.0, &off, &p);
            assert_eq!(d1[1], -beta_m(v));
            assert_eq!(d1[2], -beta_h(v));
            assert_eq!(d1[3], -beta_n(v));
        }
    }

    #[test]
    fn sodium_reversal_removes_sodium_current() {
        let p = HhParams::default();
        let off = StimulusProtocol::new(0.0, 0.0);
        let v = p.v_na;
        let a = hh_rhs([v, 0.3, 0.7, 0.4], 0.0, &off, &p);
        let b = hh_rhs([v, 0.9, 0.1, 0.4], 0.0, &off, &p);
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn rate_singularities_use_limits() {
        assert!((alpha_m(25.0) - 1.0).abs() < 1e-12);
        assert!((alpha_n(10.0) - 0.1).abs() < 1e-12);
        // continuity across the removable points
        assert!((alpha_m(25.0 + 1e-7) - alpha_m(25.0)).abs() < 1e-7);
        assert!((alpha_n(10.0 - 1e-7) - alpha_n(10.0)).abs() < 1e-8);
        // classic textbook form away from the singularity
        let v = 3.0;
        let classic = 0.1 * (25.0 - v) / (((25.0 - v) / 10.0f64).exp() - 1.0);
        assert!((alpha_m(v) - classic).abs() < 1e-14);
    }

    #[test]
    fn grid_covers_interval() {
        let g = uniform_grid(100.0, 256);
        assert_eq!(g.len(), 256);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[255], 100.0);
    }

    #[test]
    fn ord_is_not_simulable() {
        assert!(matches!(
            IonicModel::default_for(ModelId::Ord),
            Err(Error::NotImplemented(_))
        ));
    }

    #[test]
    fn model_id_round_trip() {
        for id in [ModelId::Fhn, ModelId::Hh, ModelId::Ord] {
            assert_eq!(ModelId::from_tag(id.tag()).unwrap(), id);
            assert_eq!(id.name().parse::<ModelId>().unwrap(), id);
        }
    }

    #[test]
    fn solve_rejects_bad_protocols() {
        let m = IonicModel::default_for(ModelId::Fhn).unwrap();
        let o = SolverOptions::default();
        assert!(solve(&m, &StimulusProtocol::new(-1.0, 1.0), 16, &o).is_err());
        assert!(solve(&m, &StimulusProtocol::new(1.0, 101.0), 16, &o).is_err());
        assert!(solve(&m, &StimulusProtocol::new(1.0, 1.0), 1, &o).is_err());
    }
}
