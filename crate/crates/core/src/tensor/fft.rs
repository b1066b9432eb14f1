//! Real-input FFT along the last axis, backed by `rustfft`.
//!
//! Convention: `X_k = sum_j x_j exp(-2 pi i j k / n)` (unnormalized forward),
//! and the inverse carries the `1/n` factor.

use super::{DType, Tensor};
use crate::error::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::sync::Arc;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Number of non-negative frequency bins for a real signal of length `n`.
pub fn spectrum_len(n: usize) -> usize {
    n / 2 + 1
}

/// Row-wise real FFT: `rows` signals of length `n` to interleaved spectra of
/// length `n/2 + 1`.
pub(crate) fn rfft_rows(data: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let m = spectrum_len(n);
    let fft = plan(n, false);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; rows * m * 2];
    for r in 0..rows {
        for (b, &x) in buf.iter_mut().zip(&data[r * n..(r + 1) * n]) {
            *b = Complex64::new(x, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let dst = &mut out[r * m * 2..(r + 1) * m * 2];
        for (k, c) in buf[..m].iter().enumerate() {
            dst[2 * k] = c.re;
            dst[2 * k + 1] = c.im;
        }
    }
    out
}

/// Row-wise inverse of [`rfft_rows`]. Imaginary parts of the DC bin (and of
/// the Nyquist bin for even `n`) do not contribute to the output.
pub(crate) fn irfft_rows(spec: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let m = spectrum_len(n);
    let fft = plan(n, true);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; rows * n];
    let inv_n = 1.0 / n as f64;
    for r in 0..rows {
        let src = &spec[r * m * 2..(r + 1) * m * 2];
        for k in 0..m {
            buf[k] = Complex64::new(src[2 * k], src[2 * k + 1]);
        }
        for k in 1..n - m + 1 {
            buf[n - k] = buf[k].conj();
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in out[r * n..(r + 1) * n].iter_mut().zip(&buf) {
            *o = c.re * inv_n;
        }
    }
    out
}

/// Forward basis `[n, 2k]` for the first `k` modes: column `2q` holds
/// `cos(2 pi j q / n)`, column `2q + 1` holds `-sin(2 pi j q / n)`.
pub(crate) fn forward_basis(n: usize, k: usize) -> Arc<Vec<f64>> {
    cached(n, k, false)
}

/// Inverse basis `[2k, n]` reconstructing a signal from its first `k` modes
/// with every higher mode zero. Rows for the imaginary DC and Nyquist parts
/// vanish, matching [`irfft_rows`].
pub(crate) fn inverse_basis(n: usize, k: usize) -> Arc<Vec<f64>> {
    cached(n, k, true)
}

type BasisKey = (usize, usize, bool);

thread_local! {
    static BASES: RefCell<std::collections::HashMap<BasisKey, Arc<Vec<f64>>>> =
        RefCell::new(std::collections::HashMap::new());
}

fn cached(n: usize, k: usize, inverse: bool) -> Arc<Vec<f64>> {
    BASES.with(|b| {
        b.borrow_mut()
            .entry((n, k, inverse))
            .or_insert_with(|| Arc::new(build_basis(n, k, inverse)))
            .clone()
    })
}

fn build_basis(n: usize, k: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; 2 * k * n];
    let step = 2.0 * std::f64::consts::PI / n as f64;
    for j in 0..n {
        for q in 0..k {
            let theta = ((j * q) % n) as f64 * step;
            let (s, c) = theta.sin_cos();
            if inverse {
                let edge = q == 0 || 2 * q == n;
                let w = if edge { 1.0 } else { 2.0 } / n as f64;
                out[2 * q * n + j] = w * c;
                out[(2 * q + 1) * n + j] = if edge { 0.0 } else { -w * s };
            } else {
                out[j * 2 * k + 2 * q] = c;
                out[j * 2 * k + 2 * q + 1] = -s;
            }
        }
    }
    out
}

/// Real FFT along the last axis. Returns the `n/2 + 1` non-negative modes.
pub fn rfft(signal: &Tensor) -> Result<Tensor> {
    if signal.dtype() != DType::Real {
        return Err(Error::Contract("rfft expects a real tensor".into()));
    }
    let n = signal.last_dim();
    if signal.shape().is_empty() || n < 2 {
        return Err(Error::InvalidLength(format!(
            "rfft needs a last axis of length >= 2, got {n}"
        )));
    }
    let rows = signal.rows();
    let mut shape = signal.shape().to_vec();
    *shape.last_mut().unwrap() = spectrum_len(n);
    Tensor::complex(&shape, rfft_rows(signal.data(), rows, n))
}

/// Inverse real FFT producing signals of length `n` along the last axis.
pub fn irfft(spectrum: &Tensor, n: usize) -> Result<Tensor> {
    if spectrum.dtype() != DType::Complex {
        return Err(Error::Contract("irfft expects a complex tensor".into()));
    }
    let m = spectrum.last_dim();
    if spectrum.shape().is_empty() || n < 2 || m != spectrum_len(n) {
        return Err(Error::InvalidLength(format!(
            "spectrum of length {m} cannot be inverted to length {n}"
        )));
    }
    let rows = spectrum.rows();
    let mut shape = spectrum.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(&shape, irfft_rows(spectrum.data(), rows, n))
}
