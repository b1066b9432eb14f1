//! Tuned configurations for each model and search mode.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::fno::{ActivationKind, FnoConfig, Variant};
use crate::ionic::ModelId;

pub const PROJECTION_HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: ModelId,
    pub width: usize,
    pub depth: usize,
    pub modes: usize,
    pub activation: ActivationKind,
    pub padding: usize,
    pub variant: Variant,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
}

#[rustfmt::skip]
pub const PRESETS: [Preset; 6] = [
    p("fhn-unconstrained", ModelId::Fhn, 224, 4, 20, ActivationKind::LeakyRelu, 15, Variant::Mlp, 6.2e-4, 9.7e-4, 0.85),
    p("hh-unconstrained", ModelId::Hh, 256, 4, 24, ActivationKind::LeakyRelu, 15, Variant::Mlp, 4.4e-4, 7.5e-4, 0.88),
    p("ord-unconstrained", ModelId::Ord, 192, 5, 32, ActivationKind::Gelu, 14, Variant::Mlp, 8.3e-4, 1e-3, 0.93),
    p("fhn-constrained", ModelId::Fhn, 64, 5, 12, ActivationKind::Gelu, 5, Variant::Mlp, 1.7e-3, 4.8e-4, 0.93),
    p("hh-constrained", ModelId::Hh, 96, 5, 5, ActivationKind::Gelu, 7, Variant::Mlp, 7.6e-3, 5.1e-4, 0.92),
    p("ord-constrained", ModelId::Ord, 32, 5, 48, ActivationKind::Gelu, 15, Variant::Classic, 4.2e-3, 4.9e-4, 0.93),
];

#[allow(clippy::too_many_arguments)]
const fn p(
    name: &'static str,
    model: ModelId,
    width: usize,
    depth: usize,
    modes: usize,
    activation: ActivationKind,
    padding: usize,
    variant: Variant,
    lr: f64,
    weight_decay: f64,
    gamma: f64,
) -> Preset {
    Preset {
        name,
        model,
        width,
        depth,
        modes,
        activation,
        padding,
        variant,
        lr,
        weight_decay,
        gamma,
    }
}

/// Output channel count of a model's trajectories.
pub fn state_dim(model: ModelId) -> usize {
    match model {
        ModelId::Fhn => 2,
        ModelId::Hh => 4,
        ModelId::Ord => 41,
    }
}

impl Preset {
    pub fn lookup(name: &str) -> Result<&'static Preset> {
        PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
            let known: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
            Error::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
        })
    }

    /// Network configuration, without the run-time check on the model.
    pub fn fno_config(&self, in_channels: usize) -> FnoConfig {
        FnoConfig {
            in_channels,
            out_channels: state_dim(self.model),
            width: self.width,
            depth: self.depth,
            modes: self.modes,
            activation: self.activation,
            padding: self.padding,
            variant: self.variant,
            projection_hidden: PROJECTION_HIDDEN,
        }
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            gamma: self.gamma,
            epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Both configurations, rejecting models that cannot be trained here.
    pub fn resolve(&self, in_channels: usize, epochs: usize, seed: u64) -> Result<(FnoConfig, TrainConfig)> {
        if self.model == ModelId::Ord {
            return Err(Error::NotImplemented(format!(
                "preset `{}` targets the O'Hara-Rudy model, which has no data generator",
                self.name
            )));
        }
        Ok((self.fno_config(in_channels), self.train_config(epochs, seed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fhn_constrained_row() {
        let p = Preset::lookup("fhn-constrained").unwrap();
        let (c, t) = p.resolve(2, 10, 0).unwrap();
        assert_eq!((c.width, c.depth, c.modes, c.padding), (64, 5, 12, 5));
        assert_eq!(c.activation, ActivationKind::Gelu);
        assert_eq!(c.variant, Variant::Mlp);
        assert_eq!((t.lr, t.weight_decay, t.gamma), (1.7e-3, 4.8e-4, 0.93));
    }

    #[test]
    fn hh_unconstrained_row() {
        let c = Preset::lookup("hh-unconstrained").unwrap().fno_config(2);
        assert_eq!((c.width, c.depth, c.modes, c.padding), (256, 4, 24, 15));
        assert_eq!(c.activation, ActivationKind::LeakyRelu);
        assert_eq!(c.out_channels, 4);
    }

    #[test]
    fn ord_rows_parse_but_do_not_resolve() {
        let p = Preset::lookup("ord-constrained").unwrap();
        assert_eq!(p.variant, Variant::Classic);
        assert!(matches!(p.resolve(2, 1, 0), Err(Error::NotImplemented(_))));
    }

    #[test]
    fn unknown_preset() {
        assert!(Preset::lookup("fhn-huge").is_err());
    }
}
