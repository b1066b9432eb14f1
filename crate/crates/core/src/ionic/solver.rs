//! Linearly-implicit Rosenbrock (2,3) integrator for stiff systems.
//!
//! Second-order W-method with an embedded third-order error estimate
//! (the pair used by MATLAB's `ode23s`). The Jacobian and the time
//! derivative of the right-hand side are approximated by forward
//! differences. Dense output between accepted steps is cubic Hermite.
//!
//! Step control is error per unit step: the local estimate must stay below
//! `(atol + rtol |y|) * min(h, 1)`, which keeps the global error on the
//! order of the tolerance instead of growing with the step count.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Smallest step accepted before reporting a stiffness failure.
    pub h_min: f64,
    /// Upper bound on the step as a fraction of the integration span.
    pub h_max_fraction: f64,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            h_min: 1e-12,
            h_max_fraction: 0.1,
            max_steps: 10_000_000,
        }
    }
}

impl SolverOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!(
                "tolerances must be positive (rtol = {}, atol = {})",
                self.rtol, self.atol
            )));
        }
        Ok(())
    }
}

/// Counters from one integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// Dense LU factorization with partial pivoting of a small square matrix.
struct Lu {
    n: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    fn factor(n: usize, mut a: Vec<f64>) -> Option<Self> {
        let mut piv = vec![0; n];
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k] == 0.0 || !a[p * n + k].is_finite() {
                return None;
            }
            piv[k] = p;
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
            }
            for i in k + 1..n {
                let f = a[i * n + k] / a[k * n + k];
                a[i * n + k] = f;
                for c in k + 1..n {
                    a[i * n + c] -= f * a[k * n + c];
                }
            }
        }
        Some(Self { n, a, piv })
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for i in 0..n {
            for c in 0..i {
                b[i] -= self.a[i * n + c] * b[c];
            }
        }
        for i in (0..n).rev() {
            for c in i + 1..n {
                b[i] -= self.a[i * n + c] * b[c];
            }
            b[i] /= self.a[i * n + i];
        }
    }
}

const D: f64 = 0.292_893_218_813_452_5; // 1 / (2 + sqrt 2)
const E32: f64 = 7.414_213_562_373_095; // 6 + sqrt 2

struct Rhs<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(f64, &[f64], &mut [f64])> Rhs<F> {
    fn eval(&mut self, t: f64, y: &[f64], out: &mut [f64]) {
        self.evals += 1;
        (self.f)(t, y, out);
    }
}

/// Forward-difference Jacobian `J[i][j] = df_i/dy_j` (row-major) and
/// time derivative `df/dt`.
fn jacobian<F: FnMut(f64, &[f64], &mut [f64])>(
    rhs: &mut Rhs<F>,
    t: f64,
    y: &[f64],
    f0: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let sqrt_eps = f64::EPSILON.sqrt();
    let mut jac = vec![0.0; n * n];
    let mut yp = y.to_vec();
    let mut fp = vec![0.0; n];
    for j in 0..n {
        let h = sqrt_eps * y[j].abs().max(1.0);
        yp[j] = y[j] + h;
        let dh = yp[j] - y[j];
        rhs.eval(t, &yp, &mut fp);
        for i in 0..n {
            jac[i * n + j] = (fp[i] - f0[i]) / dh;
        }
        yp[j] = y[j];
    }
    let ht = sqrt_eps * t.abs().max(1.0);
    rhs.eval(t + ht, y, &mut fp);
    let dfdt = fp.iter().zip(f0).map(|(a, b)| (a - b) / ht).collect();
    (jac, dfdt)
}

fn hermite(t0: f64, h: f64, y0: &[f64], f0: &[f64], y1: &[f64], f1: &[f64], t: f64, out: &mut [f64]) {
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h * h10 * f0[i] + h01 * y1[i] + h * h11 * f1[i];
    }
}

/// One Rosenbrock step of size `h` from `(t, y)`. Returns the new state and
/// the scaled error estimate vector, or `None` if `I - h d J` is singular.
#[allow(clippy::too_many_arguments)]
fn step<F: FnMut(f64, &[f64], &mut [f64])>(
    rhs: &mut Rhs<F>,
    t: f64,
    y: &[f64],
    f0: &[f64],
    jac: &[f64],
    dfdt: &[f64],
    h: f64,
    f2: &mut [f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = if i == j { 1.0 } else { 0.0 } - h * D * jac[i * n + j];
        }
    }
    let lu = Lu::factor(n, w)?;

    let mut k1: Vec<f64> = (0..n).map(|i| f0[i] + h * D * dfdt[i]).collect();
    lu.solve(&mut k1);

    let mid: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    let mut f1 = vec![0.0; n];
    rhs.eval(t + 0.5 * h, &mid, &mut f1);

    let mut k2: Vec<f64> = (0..n).map(|i| f1[i] - k1[i]).collect();
    lu.solve(&mut k2);
    for i in 0..n {
        k2[i] += k1[i];
    }

    let ynew: Vec<f64> = (0..n).map(|i| y[i] + h * k2[i]).collect();
    rhs.eval(t + h, &ynew, f2);

    let mut k3: Vec<f64> = (0..n)
        .map(|i| f2[i] - E32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i]) + h * D * dfdt[i])
        .collect();
    lu.solve(&mut k3);

    let err = (0..n)
        .map(|i| h / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i]))
        .collect();
    Some((ynew, err))
}

/// Adaptive integration of `y' = f(t, y)` from `t0` to `t1`.
///
/// `times` must be sorted and lie in `[t0, t1]`; the state at each is
/// returned in order. The final state is returned alongside.
pub fn integrate<F>(
    f: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    times: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, SolverStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    opts.validate()?;
    let n = y0.len();
    let mut rhs = Rhs { f, evals: 0 };
    let mut stats = SolverStats::default();
    let mut out = Vec::with_capacity(times.len());
    let mut next = 0;
    while next < times.len() && times[next] <= t0 {
        out.push(y0.to_vec());
        next += 1;
    }
    let span = t1 - t0;
    if span <= 0.0 {
        while out.len() < times.len() {
            out.push(y0.to_vec());
        }
        return Ok((out, y0.to_vec(), stats));
    }

    let h_max = opts.h_max_fraction * span;
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f0 = vec![0.0; n];
    rhs.eval(t, &y, &mut f0);

    let scale = |y: &[f64], i: usize| opts.atol + opts.rtol * y[i].abs();
    let d0 = (0..n)
        .map(|i| f0[i].abs() / scale(&y, i))
        .fold(0.0, f64::max);
    let mut h = if d0 > 0.0 {
        0.8 * opts.rtol.sqrt() / d0
    } else {
        h_max
    };
    h = h.clamp(10.0 * opts.h_min, h_max);

    let mut f2 = vec![0.0; n];
    let mut dense = vec![0.0; n];
    let (mut jac, mut dfdt) = jacobian(&mut rhs, t, &y, &f0);
    while t < t1 {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::Stiffness { t });
        }
        let last = t + h >= t1 || t1 - (t + h) < opts.h_min;
        if last {
            h = t1 - t;
        }
        let attempt = step(&mut rhs, t, &y, &f0, &jac, &dfdt, h, &mut f2);
        let (ynew, errv, err) = match attempt {
            Some((ynew, errv)) if ynew.iter().all(|v| v.is_finite()) => {
                let unit = h.min(1.0);
                let err = (0..n)
                    .map(|i| {
                        let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
                        errv[i].abs() / (sc * unit)
                    })
                    .fold(0.0, f64::max);
                (ynew, errv, err)
            }
            _ => (Vec::new(), Vec::new(), f64::INFINITY),
        };
        let _ = errv;
        if err <= 1.0 {
            let t_new = if last { t1 } else { t + h };
            while next < times.len() && times[next] <= t_new {
                hermite(t, t_new - t, &y, &f0, &ynew, &f2, times[next], &mut dense);
                out.push(dense.clone());
                next += 1;
            }
            t = t_new;
            y = ynew;
            f0.copy_from_slice(&f2);
            stats.accepted += 1;
            if t >= t1 {
                break;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.8 * err.powf(-0.5)).min(5.0)
            };
            h = (h * factor).min(h_max);
            let jd = jacobian(&mut rhs, t, &y, &f0);
            jac = jd.0;
            dfdt = jd.1;
        } else {
            stats.rejected += 1;
            let factor = if err.is_finite() {
                (0.8 * err.powf(-0.5)).max(0.2)
            } else {
                0.2
            };
            h *= factor;
            if h < opts.h_min {
                return Err(Error::Stiffness { t });
            }
        }
    }
    while out.len() < times.len() {
        out.push(y.clone());
    }
    stats.rhs_evals = rhs.evals;
    Ok((out, y, stats))
}

/// Fixed-step integration (no error control). Used to measure the
/// method's convergence order.
pub fn integrate_fixed<F>(f: F, y0: &[f64], t0: f64, t1: f64, steps: usize) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut rhs = Rhs { f, evals: 0 };
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut f0 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        rhs.eval(t, &y, &mut f0);
        let (jac, dfdt) = jacobian(&mut rhs, t, &y, &f0);
        let (ynew, _) = step(&mut rhs, t, &y, &f0, &jac, &dfdt, h, &mut f2)
            .ok_or(Error::Stiffness { t })?;
        y = ynew;
    }
    Ok(y)
}
