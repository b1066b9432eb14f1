use ionop::dataset::NormStats;
use ionop::fno::{init, ActivationKind, FnoConfig, FnoParams, Variant};
use ionop::tensor::Tensor;
use ionop::train::{channel_error, relative_l2_loss, relative_metric, AdamW, Norm};
use proptest::prelude::*;

const REL_TOL: f64 = 1e-12;
const ROUND_TRIP_TOL: f64 = 1e-12;

fn traj(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, len)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| (traj(n), traj(n), traj(n)))
}

fn nonzero(u: &[f64]) -> bool {
    u.iter().map(|x| x * x).sum::<f64>() > 1e-6
}

proptest! {
    #[test]
    fn errors_are_scale_invariant((u, p, _) in pair(), c in 0.01..100.0f64) {
        prop_assume!(nonzero(&u));
        for norm in Norm::ALL {
            let a = channel_error(&u, &p, norm, 0.1).unwrap();
            let su: Vec<f64> = u.iter().map(|x| c * x).collect();
            let sp: Vec<f64> = p.iter().map(|x| c * x).collect();
            let b = channel_error(&su, &sp, norm, 0.1).unwrap();
            prop_assert!((a - b).abs() <= REL_TOL * a.max(1.0));
        }
    }

    #[test]
    fn errors_obey_the_triangle_inequality((u, p, q) in pair()) {
        prop_assume!(nonzero(&u));
        // The q-to-p distance over the norm of u, written as an error against u.
        let shifted: Vec<f64> = u.iter().zip(&p).zip(&q).map(|((a, b), c)| a + b - c).collect();
        for norm in Norm::ALL {
            let direct = channel_error(&u, &p, norm, 0.1).unwrap();
            let via = channel_error(&u, &q, norm, 0.1).unwrap() + channel_error(&u, &shifted, norm, 0.1).unwrap();
            prop_assert!(direct <= via * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn loss_is_non_negative_and_zero_on_the_truth((u, p, _) in pair()) {
        prop_assume!(nonzero(&u));
        let n = u.len();
        let truth = Tensor::new(&[1, 1, n], u.clone()).unwrap();
        let pred = Tensor::new(&[1, 1, n], p).unwrap();
        prop_assert!(relative_l2_loss(&truth, &pred).unwrap() >= 0.0);
        prop_assert_eq!(relative_l2_loss(&truth, &truth).unwrap(), 0.0);
        for norm in Norm::ALL {
            prop_assert!(relative_metric(&truth, &pred, norm, 0.5).unwrap() >= 0.0);
        }
    }

    #[test]
    fn normalization_round_trips(
        (u, p, _) in pair(),
        lo in -100.0..0.0f64,
        span in 0.1..200.0f64,
    ) {
        let n = u.len();
        let stats = NormStats { input: (0.0, 1.0), outputs: vec![(lo, lo + span), (-1.0, 3.0)] };
        let t = Tensor::new(&[1, 2, n], u.iter().chain(&p).copied().collect()).unwrap();
        let back = stats.denormalize(&stats.normalize(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= ROUND_TRIP_TOL * a.abs().max(span));
        }
    }
}

#[test]
fn h1_penalises_derivative_mismatch() {
    let n = 64;
    let dt = 1.0 / n as f64;
    let u: Vec<f64> = (0..n).map(|k| 1.0 + (k as f64 * dt * 6.0).sin()).collect();
    let p: Vec<f64> = u.iter().enumerate().map(|(k, v)| v + 0.05 * (k as f64 * 2.5).sin()).collect();
    let l2 = channel_error(&u, &p, Norm::L2, dt).unwrap();
    let h1 = channel_error(&u, &p, Norm::H1, dt).unwrap();
    assert!(h1 > 2.0 * l2, "h1 {h1} l2 {l2}");
}

#[test]
fn zero_truth_channel_is_undefined() {
    assert_eq!(channel_error(&[0.0; 4], &[1.0; 4], Norm::L2, 1.0), None);
}

fn small_params() -> FnoParams {
    let cfg = FnoConfig {
        in_channels: 1,
        out_channels: 1,
        width: 2,
        depth: 1,
        modes: 2,
        activation: ActivationKind::Gelu,
        padding: 0,
        variant: Variant::Classic,
        projection_hidden: 2,
    };
    init(&cfg, 7).unwrap()
}

fn filled(p: &FnoParams, f: impl Fn(usize) -> f64) -> Vec<Tensor> {
    let mut k = 0;
    p.iter()
        .iter()
        .map(|t| {
            let data = (0..t.data().len())
                .map(|_| {
                    k += 1;
                    f(k)
                })
                .collect();
            Tensor::new(t.shape(), data).unwrap()
        })
        .collect()
}

#[test]
fn adamw_matches_hand_iteration() {
    let (b1, b2, eps, wd, lr) = (0.9, 0.999, 1e-8, 0.01, 1e-3);
    let gs = [0.5, -0.25, 1.0];
    let mut p = small_params();
    let theta0 = p.iter()[0].data()[0];
    let mut opt = AdamW::new(&p, b1, b2, eps, wd);
    for g in gs {
        let grads = filled(&p, |_| g);
        opt.step(&mut p, &grads, lr).unwrap();
    }
    // Written out for three steps with decoupled decay applied first.
    let m1 = 0.1 * 0.5;
    let v1 = 0.001 * 0.25;
    let t1 = theta0 * (1.0 - lr * wd) - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + eps);
    let m2 = 0.9 * m1 + 0.1 * -0.25;
    let v2 = 0.999 * v1 + 0.001 * 0.0625;
    let c1 = 1.0 - 0.9f64.powi(2);
    let c2 = 1.0 - 0.999f64.powi(2);
    let t2 = t1 * (1.0 - lr * wd) - lr * (m2 / c1) / ((v2 / c2).sqrt() + eps);
    let m3 = 0.9 * m2 + 0.1 * 1.0;
    let v3 = 0.999 * v2 + 0.001 * 1.0;
    let c1 = 1.0 - 0.9f64.powi(3);
    let c2 = 1.0 - 0.999f64.powi(3);
    let t3 = t2 * (1.0 - lr * wd) - lr * (m3 / c1) / ((v3 / c2).sqrt() + eps);
    assert!((p.iter()[0].data()[0] - t3).abs() < 1e-12);
    assert_eq!(opt.steps_taken(), 3);
}

#[test]
fn memoryless_adam_takes_sign_steps() {
    let lr = 0.01;
    let mut p = small_params();
    let before = p.clone();
    let mut opt = AdamW::new(&p, 0.0, 0.0, 0.0, 0.0);
    let grads = filled(&p, |k| if k % 2 == 0 { 3.0 * k as f64 } else { -0.001 * k as f64 });
    opt.step(&mut p, &grads, lr).unwrap();
    for ((a, b), g) in p.iter().iter().zip(before.iter()).zip(&grads) {
        for ((x, y), gi) in a.data().iter().zip(b.data()).zip(g.data()) {
            assert!((y - x - lr * gi.signum()).abs() < 1e-15);
        }
    }
}
