use ionop::fno::{init, ActivationKind, FnoConfig, Variant};
use ionop::tensor::{irfft, rfft, Graph, Tensor};
use ionop::train::batch_loss_and_grads;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const ROUND_TRIP_TOL: f64 = 1e-12;
const DFT_TOL: f64 = 1e-12;
const PARSEVAL_REL_TOL: f64 = 1e-10;
const FD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

fn signal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// O(n^2) reference with angles reduced modulo n.
fn brute_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n / 2 + 1)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, &v)| {
                let a = -2.0 * PI * ((j * k) % n) as f64 / n as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

#[test]
fn dft_equivalence_on_powers_of_two() {
    for n in [4, 8, 16, 32] {
        let x = signal(n, n as u64);
        let spec = rfft(&Tensor::new(&[n], x.clone()).unwrap()).unwrap();
        let got = spec.to_complex_vec().unwrap();
        for (k, (re, im)) in brute_dft(&x).into_iter().enumerate() {
            assert!((got[k].re - re).abs() < DFT_TOL, "n {n} k {k}");
            assert!((got[k].im - im).abs() < DFT_TOL, "n {n} k {k}");
        }
    }
}

proptest! {
    #[test]
    fn round_trip_is_identity(n in 2usize..300, seed in any::<u64>()) {
        let x = signal(n, seed);
        let back = irfft(&rfft(&Tensor::new(&[n], x.clone()).unwrap()).unwrap(), n).unwrap();
        for (a, b) in x.iter().zip(back.data()) {
            prop_assert!((a - b).abs() < ROUND_TRIP_TOL);
        }
    }

    #[test]
    fn parseval_holds(half in 1usize..128, seed in any::<u64>()) {
        let n = 2 * half;
        let x = signal(n, seed);
        let spec = rfft(&Tensor::new(&[n], x.clone()).unwrap()).unwrap().to_complex_vec().unwrap();
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = spec
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let w = if k == 0 || k == half { 1.0 } else { 2.0 };
                w * c.norm_sqr()
            })
            .sum::<f64>()
            / n as f64;
        prop_assert!((time - freq).abs() <= PARSEVAL_REL_TOL * time);
    }

    #[test]
    fn truncated_modes_match_the_full_transform(n in 4usize..80, seed in any::<u64>()) {
        let k = 1 + (seed as usize) % (n / 2 + 1);
        let x = Tensor::new(&[1, n], signal(n, seed)).unwrap();
        let full = rfft(&x).unwrap();
        let g = Graph::new();
        let modes = g.constant(x).dft_modes(k).unwrap();
        for q in 0..2 * k {
            prop_assert!((modes.value().data()[q] - full.data()[q]).abs() < DFT_TOL * n as f64);
        }
    }
}

fn tiny(variant: Variant, activation: ActivationKind) -> FnoConfig {
    FnoConfig {
        in_channels: 2,
        out_channels: 2,
        width: 3,
        depth: 2,
        modes: 3,
        activation,
        padding: 2,
        variant,
        projection_hidden: 4,
    }
}

/// Central differences of the batch loss against every parameter scalar of
/// the whole network, over a batch larger than one gradient chunk.
fn check_full_network(cfg: &FnoConfig, seed: u64) {
    let n = 8;
    let batch = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(&[batch, 2, n], (0..batch * 2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = Tensor::new(&[batch, 2, n], (0..batch * 2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let params = init(cfg, seed).unwrap();
    let (_, grads) = batch_loss_and_grads(cfg, &params, &x, &y).unwrap();
    let n_tensors = params.iter().len();
    for t in 0..n_tensors {
        let len = params.iter()[t].data().len();
        for j in 0..len {
            let shifted = |h: f64| {
                let mut p = params.clone();
                p.iter_mut()[t].data_mut()[j] += h;
                batch_loss_and_grads(cfg, &p, &x, &y).unwrap().0
            };
            let fd = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            let a = grads[t].data()[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(err < FD_REL_TOL, "{}[{j}]: analytic {a}, fd {fd}", params.names()[t]);
        }
    }
}

#[test]
fn full_network_gradients_classic_gelu() {
    check_full_network(&tiny(Variant::Classic, ActivationKind::Gelu), 1);
}

#[test]
fn full_network_gradients_mlp_tanh() {
    check_full_network(&tiny(Variant::Mlp, ActivationKind::Tanh), 2);
}

#[test]
fn full_network_gradients_mlp_gelu() {
    check_full_network(&tiny(Variant::Mlp, ActivationKind::Gelu), 3);
}
