//! One-dimensional Fourier neural operator.
//!
//! Pipeline: pointwise linear lift, zero padding of the grid axis, `depth`
//! Fourier layers, crop back to the input grid, and a two-stage pointwise
//! projection. Each Fourier layer computes
//!
//! ```text
//! Classic: act(W v + b + K v)
//! MLP:     act(W v + b + M2 act(M1 K v + c1) + c2)
//! ```
//!
//! where `K` is the spectral convolution: real FFT, per-mode complex channel
//! mixing on the lowest `modes` frequencies, inverse real FFT. Only
//! non-negative modes are stored, so the kernel spectrum is Hermitian and the
//! layer output is real by construction.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, Provenance, WEIGHTS_MAGIC};

use crate::error::{Error, Result};
use crate::tensor::{spectrum_len, Activation, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Slope used for the leaky-ReLU choice of [`ActivationKind`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Gelu,
    LeakyRelu,
    Relu,
    Tanh,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Gelu,
        ActivationKind::LeakyRelu,
        ActivationKind::Relu,
        ActivationKind::Tanh,
    ];

    pub fn activation(self) -> Activation {
        match self {
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::LeakyRelu => Activation::LeakyRelu(LEAKY_SLOPE),
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Tanh => Activation::Tanh,
        }
    }
}

/// Fourier layer flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Classic,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden channel width.
    pub width: usize,
    /// Number of Fourier layers.
    pub depth: usize,
    /// Retained Fourier modes per layer.
    pub modes: usize,
    pub activation: ActivationKind,
    /// Zero padding appended to the grid axis, in grid points.
    pub padding: usize,
    pub variant: Variant,
    pub projection_hidden: usize,
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.width <= self.in_channels {
            return Err(Error::Config(format!(
                "width {} must exceed the {} input channels",
                self.width, self.in_channels
            )));
        }
        if self.depth == 0 || self.modes == 0 || self.projection_hidden == 0 {
            return Err(Error::Config(
                "depth, modes and projection width must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Checks that `modes` fits the spectrum of a padded grid of `n_points`.
    pub fn check_grid(&self, n_points: usize, padding: usize) -> Result<()> {
        let available = spectrum_len(n_points + padding);
        if self.modes > available {
            return Err(Error::Config(format!(
                "{} modes requested but a grid of {} (+{} padding) has {}",
                self.modes, n_points, padding, available
            )));
        }
        Ok(())
    }

    /// Exact number of trainable real scalars (a complex weight counts 2).
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let linear = |cin: usize, cout: usize| cin * cout + cout;
        let per_layer = 2 * d * d * self.modes
            + linear(d, d)
            + match self.variant {
                Variant::Mlp => 2 * linear(d, d),
                Variant::Classic => 0,
            };
        linear(self.in_channels, d)
            + self.depth * per_layer
            + linear(d, self.projection_hidden)
            + linear(self.projection_hidden, self.out_channels)
    }

    /// Padding that keeps the periodic extent of the padded domain fixed when
    /// the grid is refined from `n_points` to `n_new` points over the same
    /// interval. Returns `None` if no non-negative padding achieves it.
    pub fn padding_for_grid(&self, n_points: usize, n_new: usize) -> Option<usize> {
        let span = (self.padding + n_points) as f64 / (n_points - 1) as f64;
        let target = span * (n_new - 1) as f64;
        let pad = target.round() - n_new as f64;
        (pad >= 0.0 && (target - target.round()).abs() < 1e-9).then_some(pad as usize)
    }
}

pub fn count_params(config: &FnoConfig) -> usize {
    config.param_count()
}

/// Pointwise affine map: `weight` is `[out, in]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierLayer<T> {
    /// `[width, width, modes, 2]`: interleaved complex matrix per mode.
    pub spectral: T,
    pub pointwise: Linear<T>,
    /// Inner two-stage MLP applied to the spectral branch (MLP variant).
    pub mlp: Option<(Linear<T>, Linear<T>)>,
}

/// All learnable tensors of the operator, generic so the same layout can hold
/// values, graph handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FnoWeights<T> {
    pub lift: Linear<T>,
    pub layers: Vec<FourierLayer<T>>,
    pub proj_hidden: Linear<T>,
    pub proj_out: Linear<T>,
}

pub type FnoParams = FnoWeights<Tensor>;

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U, prefix: &str) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<T> FnoWeights<T> {
    /// Builds a new set of weights by applying `f(name, value)` to every
    /// tensor in canonical order.
    pub fn map_named<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> FnoWeights<U> {
        let lift = self.lift.map(&mut f, "lift");
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| FourierLayer {
                spectral: f(&format!("layers.{i}.spectral"), &l.spectral),
                pointwise: l.pointwise.map(&mut f, &format!("layers.{i}.pointwise")),
                mlp: l.mlp.as_ref().map(|(a, b)| {
                    (
                        a.map(&mut f, &format!("layers.{i}.mlp.0")),
                        b.map(&mut f, &format!("layers.{i}.mlp.1")),
                    )
                }),
            })
            .collect();
        let proj_hidden = self.proj_hidden.map(&mut f, "proj.0");
        let proj_out = self.proj_out.map(&mut f, "proj.1");
        FnoWeights {
            lift,
            layers,
            proj_hidden,
            proj_out,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> FnoWeights<U> {
        self.map_named(|_, t| f(t))
    }

    /// References in canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = vec![&self.lift.weight, &self.lift.bias];
        for l in &self.layers {
            out.push(&l.spectral);
            out.extend([&l.pointwise.weight, &l.pointwise.bias]);
            if let Some((a, b)) = &l.mlp {
                out.extend([&a.weight, &a.bias, &b.weight, &b.bias]);
            }
        }
        out.extend([
            &self.proj_hidden.weight,
            &self.proj_hidden.bias,
            &self.proj_out.weight,
            &self.proj_out.bias,
        ]);
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.lift.weight, &mut self.lift.bias];
        for l in &mut self.layers {
            out.push(&mut l.spectral);
            out.push(&mut l.pointwise.weight);
            out.push(&mut l.pointwise.bias);
            if let Some((a, b)) = &mut l.mlp {
                out.extend([&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias]);
            }
        }
        out.extend([
            &mut self.proj_hidden.weight,
            &mut self.proj_hidden.bias,
            &mut self.proj_out.weight,
            &mut self.proj_out.bias,
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map_named(|n, _| names.push(n.to_string()));
        names
    }
}

impl FnoParams {
    pub fn scalar_count(&self) -> usize {
        self.iter().iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().iter().all(|t| t.is_finite())
    }

    /// Places every tensor on `graph` as a differentiable leaf.
    pub fn leaves<'g>(&self, graph: &'g Graph) -> FnoWeights<Var<'g>> {
        self.map(|t| graph.leaf(t.clone()))
    }

    pub fn constants<'g>(&self, graph: &'g Graph) -> FnoWeights<Var<'g>> {
        self.map(|t| graph.constant(t.clone()))
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn init_linear(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Linear<Tensor> {
    let bound = (1.0 / cin as f64).sqrt();
    Linear {
        weight: uniform(&[cout, cin], bound, rng),
        bias: uniform(&[cout], bound, rng),
    }
}

/// Deterministic initialization. Pointwise maps draw from `U(+-sqrt(1/fan_in))`,
/// spectral weights from `U(+-1/(width * modes))`.
pub fn init(config: &FnoConfig, seed: u64) -> Result<FnoParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.width;
    let lift = init_linear(config.in_channels, d, &mut rng);
    let spectral_bound = 1.0 / (d * config.modes) as f64;
    let layers = (0..config.depth)
        .map(|_| FourierLayer {
            spectral: uniform(&[d, d, config.modes, 2], spectral_bound, &mut rng),
            pointwise: init_linear(d, d, &mut rng),
            mlp: (config.variant == Variant::Mlp)
                .then(|| (init_linear(d, d, &mut rng), init_linear(d, d, &mut rng))),
        })
        .collect();
    let proj_hidden = init_linear(d, config.projection_hidden, &mut rng);
    let proj_out = init_linear(config.projection_hidden, config.out_channels, &mut rng);
    Ok(FnoWeights {
        lift,
        layers,
        proj_hidden,
        proj_out,
    })
}

fn apply_linear<'g>(v: Var<'g>, lin: &Linear<Var<'g>>) -> Result<Var<'g>> {
    v.channel_matmul(lin.weight)?.bias_add(lin.bias)
}

/// `irfft(R . rfft(v))` on `[..., width, n]`, keeping the retained modes only.
pub fn spectral_conv<'g>(v: Var<'g>, weights: Var<'g>) -> Result<Var<'g>> {
    let n = *v.shape().last().ok_or_else(|| Error::Contract("empty shape".into()))?;
    let k = weights.shape().get(2).copied().unwrap_or(0);
    v.dft_modes(k)?.spectral_mix(weights)?.idft_modes(n)
}

pub fn fourier_layer<'g>(
    v: Var<'g>,
    layer: &FourierLayer<Var<'g>>,
    act: Activation,
) -> Result<Var<'g>> {
    let mut kernel = spectral_conv(v, layer.spectral)?;
    if let Some((inner, outer)) = &layer.mlp {
        let h = apply_linear(kernel, inner)?.activation(act)?;
        kernel = apply_linear(h, outer)?;
    }
    apply_linear(v, &layer.pointwise)?.add(kernel)?.activation(act)
}

fn check_finite(v: Var<'_>, layer: usize) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFailure { layer })
    }
}

/// Records a full forward pass on `input` (`[..., in_channels, n]`).
///
/// Layer indices in [`Error::NumericFailure`]: 0 is the lift, `1..=depth` the
/// Fourier layers, `depth + 1` the projection.
pub fn forward_graph<'g>(
    config: &FnoConfig,
    weights: &FnoWeights<Var<'g>>,
    input: Var<'g>,
    padding: usize,
) -> Result<Var<'g>> {
    let shape = input.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != config.in_channels {
        return Err(crate::error::shape_err(
            "forward",
            format!("expected [..., {}, n], got {shape:?}", config.in_channels),
        ));
    }
    let n = shape[shape.len() - 1];
    config.check_grid(n, padding)?;
    let act = config.activation.activation();

    let mut v = apply_linear(input, &weights.lift)?;
    check_finite(v, 0)?;
    if padding > 0 {
        v = v.pad_last(padding)?;
    }
    for (i, layer) in weights.layers.iter().enumerate() {
        v = fourier_layer(v, layer, act)?;
        check_finite(v, i + 1)?;
    }
    if padding > 0 {
        v = v.crop_last(n)?;
    }
    let h = apply_linear(v, &weights.proj_hidden)?.activation(act)?;
    let out = apply_linear(h, &weights.proj_out)?;
    check_finite(out, config.depth + 1)?;
    Ok(out)
}

/// A configured operator with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Fno {
    pub config: FnoConfig,
    pub params: FnoParams,
}

impl Fno {
    pub fn new(config: FnoConfig, seed: u64) -> Result<Self> {
        let params = init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Evaluates on `[in_channels, n]` or `[batch, in_channels, n]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_padded(input, self.config.padding)
    }

    pub fn forward_padded(&self, input: &Tensor, padding: usize) -> Result<Tensor> {
        let g = Graph::new();
        let weights = self.params.constants(&g);
        let x = g.constant(input.clone());
        let out = forward_graph(&self.config, &weights, x, padding)?;
        let value = out.value().clone();
        Ok(value)
    }

    /// Evaluates on a grid refined from the training resolution, adjusting
    /// the padding so every retained mode keeps its physical frequency.
    pub fn forward_resampled(&self, input: &Tensor, train_points: usize) -> Result<Tensor> {
        let n_new = input.last_dim();
        let pad = self
            .config
            .padding_for_grid(train_points, n_new)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no padding maps a {train_points}-point grid onto {n_new} points"
                ))
            })?;
        self.forward_padded(input, pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(variant: Variant) -> FnoConfig {
        FnoConfig {
            in_channels: 2,
            out_channels: 2,
            width: 4,
            depth: 2,
            modes: 3,
            activation: ActivationKind::Gelu,
            padding: 2,
            variant,
            projection_hidden: 5,
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn hand_counted_minimal_config() {
        let cfg = FnoConfig {
            in_channels: 1,
            out_channels: 1,
            width: 1,
            depth: 1,
            modes: 1,
            activation: ActivationKind::Gelu,
            padding: 0,
            variant: Variant::Classic,
            projection_hidden: 1,
        };
        // width must exceed input channels for a usable model, but the
        // closed form is still defined
        assert_eq!(cfg.param_count(), 10);
    }

    #[test]
    fn count_is_linear_in_modes() {
        let mut cfg = tiny(Variant::Classic);
        cfg.width = 32;
        let base = cfg.param_count();
        cfg.modes *= 2;
        assert_eq!(cfg.param_count() - base, cfg.depth * 2 * 32 * 32 * 3);
    }

    #[test]
    fn count_matches_initialized_scalars() {
        for variant in [Variant::Classic, Variant::Mlp] {
            let cfg = tiny(variant);
            let p = init(&cfg, 3).unwrap();
            assert_eq!(p.scalar_count(), cfg.param_count());
        }
    }

    #[test]
    fn constrained_fhn_preset_size() {
        let cfg = FnoConfig {
            in_channels: 2,
            out_channels: 2,
            width: 64,
            depth: 5,
            modes: 12,
            activation: ActivationKind::Gelu,
            padding: 5,
            variant: Variant::Mlp,
            projection_hidden: 128,
        };
        let rel = (cfg.param_count() as f64 - 0.57e6).abs() / 0.57e6;
        assert!(rel < 0.15, "count {}", cfg.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny(Variant::Mlp);
        assert_eq!(init(&cfg, 1).unwrap(), init(&cfg, 1).unwrap());
        assert_ne!(init(&cfg, 1).unwrap(), init(&cfg, 2).unwrap());
    }

    #[test]
    fn validate_rejects_narrow_width() {
        let mut cfg = tiny(Variant::Classic);
        cfg.width = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.width = 4;
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_parameters_give_projection_bias() {
        let cfg = tiny(Variant::Mlp);
        let mut p = init(&cfg, 0).unwrap().map(|t| Tensor::zeros_like(t));
        p.proj_out.bias = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
        let model = Fno { config: cfg, params: p };
        let out = model.forward(&random_input(&[2, 16], 1)).unwrap();
        assert_eq!(out.shape(), &[2, 16]);
        for (c, expect) in [0.25, -1.5].iter().enumerate() {
            assert!(out.data()[c * 16..(c + 1) * 16].iter().all(|v| v == expect));
        }
    }

    #[test]
    fn forward_is_reproducible() {
        let model = Fno::new(tiny(Variant::Mlp), 9).unwrap();
        let x = random_input(&[3, 2, 16], 2);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn forward_rejects_mode_overflow() {
        let mut cfg = tiny(Variant::Classic);
        cfg.modes = 8;
        cfg.padding = 0;
        let model = Fno::new(cfg, 0).unwrap();
        assert!(matches!(
            model.forward(&random_input(&[2, 8], 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_reports_failing_layer() {
        let mut model = Fno::new(tiny(Variant::Classic), 0).unwrap();
        model.params.layers[1].pointwise.bias.data_mut()[0] = f64::NAN;
        match model.forward(&random_input(&[2, 16], 0)) {
            Err(Error::NumericFailure { layer }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn padding_for_refined_grid() {
        let mut cfg = tiny(Variant::Classic);
        cfg.padding = 5;
        assert_eq!(cfg.padding_for_grid(256, 511), Some(11));
        assert_eq!(cfg.padding_for_grid(256, 256), Some(5));
    }
}
