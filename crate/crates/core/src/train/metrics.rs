//! Relative L1 / L2 / H1 errors between trajectories.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    H1,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::H1];

    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "L1",
            Norm::L2 => "L2",
            Norm::H1 => "H1",
        }
    }
}

/// Grid spacing of `n_points` samples on the unit interval. H1 derivatives
/// are taken with respect to normalized time `t / T`.
pub fn unit_spacing(n_points: usize) -> f64 {
    1.0 / (n_points.max(2) - 1) as f64
}

/// Central differences in the interior, one-sided at both ends.
pub fn derivative(u: &[f64], dt: f64) -> Vec<f64> {
    let n = u.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|k| {
            if k == 0 {
                (u[1] - u[0]) / dt
            } else if k == n - 1 {
                (u[n - 1] - u[n - 2]) / dt
            } else {
                (u[k + 1] - u[k - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Relative error of one channel, or `None` when the truth has zero norm.
pub fn channel_error(truth: &[f64], pred: &[f64], norm: Norm, dt: f64) -> Option<f64> {
    let (num, den) = match norm {
        Norm::L1 => (
            truth.iter().zip(pred).map(|(u, p)| (u - p).abs()).sum::<f64>(),
            truth.iter().map(|u| u.abs()).sum::<f64>(),
        ),
        Norm::L2 => {
            let e: Vec<f64> = truth.iter().zip(pred).map(|(u, p)| u - p).collect();
            (sq(&e).sqrt(), sq(truth).sqrt())
        }
        Norm::H1 => {
            let e: Vec<f64> = truth.iter().zip(pred).map(|(u, p)| u - p).collect();
            let de = derivative(&e, dt);
            let du = derivative(truth, dt);
            ((sq(&e) + sq(&de)).sqrt(), (sq(truth) + sq(&du)).sqrt())
        }
    };
    (den > 0.0).then(|| num / den)
}

fn check_pair(truth: &Tensor, pred: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = truth.shape();
    if s != pred.shape() || s.len() < 2 || truth.is_complex() || pred.is_complex() {
        return Err(shape_err(
            op,
            format!("truth {:?}, prediction {:?}", truth.shape(), pred.shape()),
        ));
    }
    let n = s[s.len() - 1];
    let d = s[s.len() - 2];
    let samples = truth.numel() / (n * d).max(1);
    Ok((samples, d, n))
}

/// Per-sample, per-channel relative errors of `[.., n_dim, n]` tensors.
pub fn channel_errors(truth: &Tensor, pred: &Tensor, norm: Norm, dt: f64) -> Result<Vec<Vec<Option<f64>>>> {
    let (samples, d, n) = check_pair(truth, pred, "channel_errors")?;
    let (u, p) = (truth.data(), pred.data());
    Ok((0..samples)
        .map(|s| {
            (0..d)
                .map(|j| {
                    let r = (s * d + j) * n..(s * d + j + 1) * n;
                    channel_error(&u[r.clone()], &p[r], norm, dt)
                })
                .collect()
        })
        .collect())
}

/// Channel mean per sample, averaged over samples. Any zero-norm truth
/// channel is an error.
pub fn relative_metric(truth: &Tensor, pred: &Tensor, norm: Norm, dt: f64) -> Result<f64> {
    let errs = channel_errors(truth, pred, norm, dt)?;
    let mut total = 0.0;
    for (sample, row) in errs.iter().enumerate() {
        let mut acc = 0.0;
        for (channel, e) in row.iter().enumerate() {
            acc += e.ok_or(Error::DegenerateChannel { sample, channel })?;
        }
        total += acc / row.len() as f64;
    }
    Ok(total / errs.len() as f64)
}

/// `(1/n_dim) sum_j ||u_j - p_j|| / ||u_j||`, averaged over any leading
/// batch axes.
pub fn relative_l2_loss(truth: &Tensor, pred: &Tensor) -> Result<f64> {
    relative_metric(truth, pred, Norm::L2, 1.0)
}

/// Mean over the channels whose truth has nonzero norm; `None` if there are
/// none.
pub fn mean_defined(row: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = row.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let u = t(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.2, 0.1]);
        for norm in Norm::ALL {
            assert_eq!(relative_metric(&u, &u, norm, 0.1).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_relative_error() {
        let u = t(&[1, 2], vec![3.0, 4.0]);
        let p = t(&[1, 2], vec![0.0, 0.0]);
        assert!((relative_l2_loss(&u, &p).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn channel_mean() {
        let u = t(&[2, 2], vec![3.0, 4.0, 3.0, 4.0]);
        let p = t(&[2, 2], vec![3.3, 4.4, 3.9, 5.2]);
        assert!((relative_l2_loss(&u, &p).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_truth_is_degenerate() {
        let u = t(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let p = t(&[2, 2], vec![1.0, 1.0, 0.1, 0.0]);
        assert!(matches!(
            relative_l2_loss(&u, &p),
            Err(Error::DegenerateChannel { sample: 0, channel: 1 })
        ));
    }

    #[test]
    fn constant_shift_has_equal_h1_and_l2() {
        let u = t(&[1, 5], vec![2.0; 5]);
        let p = t(&[1, 5], vec![2.5; 5]);
        let l2 = relative_metric(&u, &p, Norm::L2, 0.3).unwrap();
        let h1 = relative_metric(&u, &p, Norm::H1, 0.3).unwrap();
        assert!((l2 - h1).abs() < 1e-15);
    }

    #[test]
    fn derivative_is_exact_on_lines() {
        let u: Vec<f64> = (0..6).map(|k| 3.0 * k as f64 * 0.5 + 1.0).collect();
        for d in derivative(&u, 0.5) {
            assert!((d - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn high_frequency_error_inflates_h1() {
        let n = 2048;
        let dt = 2.0 * std::f64::consts::PI / (n - 1) as f64;
        let ts: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let u: Vec<f64> = ts.iter().map(|t| t.sin()).collect();
        let p: Vec<f64> = ts.iter().map(|t| t.sin() + 0.01 * (40.0 * t).sin()).collect();
        let (u, p) = (t(&[1, n], u), t(&[1, n], p));
        let l2 = relative_metric(&u, &p, Norm::L2, dt).unwrap();
        let h1 = relative_metric(&u, &p, Norm::H1, dt).unwrap();
        // closed form: L2 = 0.01, H1 = sqrt(0.01^2 + 0.4^2) / sqrt(2)
        assert!((l2 - 0.01).abs() < 1e-3);
        let h1_exact = (1e-4f64 + 0.16).sqrt() / 2f64.sqrt();
        assert!((h1 - h1_exact).abs() / h1_exact < 0.02, "h1 = {h1}");
        assert!(h1 / l2 > 5.0);
    }

    #[test]
    fn shape_mismatch() {
        let u = t(&[1, 2], vec![1.0, 2.0]);
        let p = t(&[2, 1], vec![1.0, 2.0]);
        assert!(matches!(relative_l2_loss(&u, &p), Err(Error::Shape { .. })));
    }
}
