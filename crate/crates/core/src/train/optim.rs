//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::fno::FnoParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Zero moments shaped like `params`.
    pub fn new(params: &FnoParams, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().iter().map(|t| vec![0.0; t.data().len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `grads` follow the order of
    /// `params.iter()`. Returns the number of scalars updated.
    pub fn step(&mut self, params: &mut FnoParams, grads: &[Tensor], lr: f64) -> Result<usize> {
        let names = params.names();
        if grads.len() != names.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                names.len()
            )));
        }
        for (name, g) in names.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::Optimizer(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let mut updated = 0;
        for (((p, g), m), v) in params
            .iter_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let theta = p.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                theta[i] *= decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                theta[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            updated += theta.len();
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::{init, ActivationKind, FnoConfig, Variant};

    fn params() -> FnoParams {
        let cfg = FnoConfig {
            in_channels: 1,
            out_channels: 1,
            width: 2,
            depth: 1,
            modes: 1,
            activation: ActivationKind::Tanh,
            padding: 0,
            variant: Variant::Classic,
            projection_hidden: 1,
        };
        init(&cfg, 1).unwrap()
    }

    fn zero_grads(p: &FnoParams) -> Vec<Tensor> {
        p.iter().iter().map(|t| Tensor::zeros_like(t)).collect()
    }

    #[test]
    fn zero_gradient_decays_exactly() {
        let mut p = params();
        let before = p.clone();
        let g = zero_grads(&p);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut p, &g, 0.01).unwrap();
        for (a, b) in p.iter().iter().zip(before.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y * (1.0 - 0.01 * 0.1));
            }
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = params();
        let before = p.clone();
        let g = zero_grads(&p);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &g, 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_non_finite_gradient_by_name() {
        let mut p = params();
        let mut g = zero_grads(&p);
        g[2].data_mut()[0] = f64::NAN;
        let name = p.names()[2].clone();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        match opt.step(&mut p, &g, 0.01) {
            Err(Error::Optimizer(n)) => assert_eq!(n, name),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn updates_every_scalar() {
        let mut p = params();
        let g = zero_grads(&p);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        assert_eq!(opt.step(&mut p, &g, 0.01).unwrap(), p.scalar_count());
    }
}
