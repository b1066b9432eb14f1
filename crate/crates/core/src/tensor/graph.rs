//! Define-by-run tape. Every op computes its value eagerly and records enough
//! to run its backward rule; [`Graph::backward`] walks the tape in reverse.

use super::fft::{forward_basis, inverse_basis, irfft_rows, rfft_rows, spectrum_len};
use super::{DType, Tensor};
use crate::error::{shape_err, Error, Result};
use std::cell::{Ref, RefCell};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// Exact (erf-based) GELU.
    Gelu,
    LeakyRelu(f64),
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Value and derivative in one evaluation.
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                (x * cdf, cdf + x * pdf)
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            _ => (self.apply(x), self.derivative(x)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            }
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    ChannelMatmul { w: usize, x: usize },
    BiasAdd { x: usize, b: usize },
    Act { x: usize, deriv: Vec<f64> },
    Pad { x: usize },
    Crop { x: usize, from: usize },
    Rfft { x: usize, n: usize },
    Irfft { z: usize, n: usize },
    DftModes { x: usize, n: usize, k: usize },
    IdftModes { z: usize, n: usize, k: usize },
    SpectralMix { z: usize, w: usize, modes: usize },
    Sum(usize),
    RelativeL2 { pred: usize, truth: Tensor, denoms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of every differentiable leaf, indexed by the leaf's [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.dtype() != DType::Real || out.value.data().len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a real scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, g, &mut grads);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.data().len()]);
                Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    dtype: node.value.dtype(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

/// `c = a b` for row-major `c` of shape `[m, n]`; `a` is `[m, kk]` and `b`
/// is `[kk, n]` under the given `(row, col)` strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, kk: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || kk == 0 || a.len() > (m - 1) * sa.0 + (kk - 1) * sa.1);
    assert!(kk == 0 || n == 0 || b.len() > (kk - 1) * sb.0 + (n - 1) * sb.1);
    unsafe {
        matrixmultiply::dgemm(
            m,
            kk,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(batch, rows, cols)` view of a `[..., rows, cols]` tensor.
fn mat_dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    let cols = s[s.len() - 1];
    let rows = s[s.len() - 2];
    (s[..s.len() - 2].iter().product(), rows, cols)
}

fn backprop(nodes: &[Node], node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*b) {
                accumulate(nodes, grads, *b, g.clone());
            }
            accumulate(nodes, grads, *a, g);
        }
        Op::Sub(a, b) => {
            if needs(*b) {
                accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
            }
            accumulate(nodes, grads, *a, g);
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.iter().map(|v| v * s).collect()),
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if needs(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
        }
        Op::ChannelMatmul { w, x } => {
            let wv = &nodes[*w].value;
            let xv = &nodes[*x].value;
            let (batch, cin, n) = mat_dims(xv);
            let cout = wv.shape()[0];
            if needs(*x) {
                let mut gx = vec![0.0; batch * cin * n];
                for b in 0..batch {
                    // gx[b] = w^T g[b]
                    unsafe {
                        matrixmultiply::dgemm(
                            cin,
                            cout,
                            n,
                            1.0,
                            wv.data().as_ptr(),
                            1,
                            cin as isize,
                            g[b * cout * n..].as_ptr(),
                            n as isize,
                            1,
                            0.0,
                            gx[b * cin * n..].as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            if needs(*w) {
                let mut gw = vec![0.0; cout * cin];
                for b in 0..batch {
                    // gw += g[b] x[b]^T
                    unsafe {
                        matrixmultiply::dgemm(
                            cout,
                            n,
                            cin,
                            1.0,
                            g[b * cout * n..].as_ptr(),
                            n as isize,
                            1,
                            xv.data()[b * cin * n..].as_ptr(),
                            1,
                            n as isize,
                            1.0,
                            gw.as_mut_ptr(),
                            cin as isize,
                            1,
                        );
                    }
                }
                accumulate(nodes, grads, *w, gw);
            }
        }
        Op::BiasAdd { x, b } => {
            if needs(*b) {
                let c = nodes[*b].value.numel();
                let n = node.value.last_dim();
                let mut gb = vec![0.0; c];
                for (r, row) in g.chunks_exact(n).enumerate() {
                    gb[r % c] += row.iter().sum::<f64>();
                }
                accumulate(nodes, grads, *b, gb);
            }
            accumulate(nodes, grads, *x, g);
        }
        Op::Act { x, deriv } => {
            let gx = g.iter().zip(deriv).map(|(g, d)| g * d).collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Pad { x } => {
            let n = nodes[*x].value.last_dim();
            let m = node.value.last_dim();
            let gx = g.chunks_exact(m).flat_map(|row| &row[..n]).copied().collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Crop { x, from } => {
            let n = node.value.last_dim();
            let mut gx = vec![0.0; node.value.rows() * from];
            for (dst, src) in gx.chunks_exact_mut(*from).zip(g.chunks_exact(n)) {
                dst[..n].copy_from_slice(src);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Rfft { x, n } => {
            // Adjoint of the real DFT: n * irfft(G') with interior modes halved.
            let m = spectrum_len(*n);
            let rows = node.value.rows();
            let mut folded = g;
            for row in folded.chunks_exact_mut(2 * m) {
                let interior_end = if n % 2 == 0 { m - 1 } else { m };
                for v in &mut row[2..2 * interior_end] {
                    *v *= 0.5;
                }
            }
            let mut gx = irfft_rows(&folded, rows, *n);
            let scale = *n as f64;
            gx.iter_mut().for_each(|v| *v *= scale);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Irfft { z, n } => {
            let m = spectrum_len(*n);
            let rows = node.value.rows();
            let mut gz = rfft_rows(&g, rows, *n);
            let inv_n = 1.0 / *n as f64;
            for row in gz.chunks_exact_mut(2 * m) {
                for (k, pair) in row.chunks_exact_mut(2).enumerate() {
                    let edge = k == 0 || (n % 2 == 0 && k == m - 1);
                    if edge {
                        pair[0] *= inv_n;
                        pair[1] = 0.0;
                    } else {
                        pair[0] *= 2.0 * inv_n;
                        pair[1] *= 2.0 * inv_n;
                    }
                }
            }
            accumulate(nodes, grads, *z, gz);
        }
        Op::DftModes { x, n, k } => {
            let rows = node.value.rows();
            let f = forward_basis(*n, *k);
            let mut gx = vec![0.0; rows * n];
            gemm(rows, 2 * k, *n, &g, (2 * k, 1), &f, (1, 2 * k), &mut gx);
            accumulate(nodes, grads, *x, gx);
        }
        Op::IdftModes { z, n, k } => {
            let rows = node.value.rows();
            let b = inverse_basis(*n, *k);
            let mut gz = vec![0.0; rows * 2 * k];
            gemm(rows, *n, 2 * k, &g, (*n, 1), &b, (1, *n), &mut gz);
            accumulate(nodes, grads, *z, gz);
        }
        Op::SpectralMix { z, w, modes } => {
            let zv = &nodes[*z].value;
            let wv = &nodes[*w].value;
            let (batch, cin, m) = mat_dims(zv);
            let cout = wv.shape()[1];
            let k = *modes;
            let (zd, wd) = (zv.data(), wv.data());
            if needs(*z) {
                let mut gz = vec![0.0; zd.len()];
                for b in 0..batch {
                    for i in 0..cin {
                        for o in 0..cout {
                            let go = 2 * (b * cout + o) * m;
                            let gi = 2 * (b * cin + i) * m;
                            let wo = 2 * (i * cout + o) * k;
                            for q in 0..k {
                                let (gr, gim) = (g[go + 2 * q], g[go + 2 * q + 1]);
                                let (wr, wi) = (wd[wo + 2 * q], wd[wo + 2 * q + 1]);
                                gz[gi + 2 * q] += gr * wr + gim * wi;
                                gz[gi + 2 * q + 1] += gim * wr - gr * wi;
                            }
                        }
                    }
                }
                accumulate(nodes, grads, *z, gz);
            }
            if needs(*w) {
                let mut gw = vec![0.0; wd.len()];
                for b in 0..batch {
                    for i in 0..cin {
                        let zi = 2 * (b * cin + i) * m;
                        for o in 0..cout {
                            let go = 2 * (b * cout + o) * m;
                            let wo = 2 * (i * cout + o) * k;
                            for q in 0..k {
                                let (gr, gim) = (g[go + 2 * q], g[go + 2 * q + 1]);
                                let (zr, zi_) = (zd[zi + 2 * q], zd[zi + 2 * q + 1]);
                                gw[wo + 2 * q] += gr * zr + gim * zi_;
                                gw[wo + 2 * q + 1] += gim * zr - gr * zi_;
                            }
                        }
                    }
                }
                accumulate(nodes, grads, *w, gw);
            }
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.data().len();
            accumulate(nodes, grads, *a, vec![g[0]; len]);
        }
        Op::RelativeL2 {
            pred,
            truth,
            denoms,
        } => {
            let pv = nodes[*pred].value.data();
            let n = truth.last_dim();
            let scale = g[0] / denoms.len() as f64;
            let mut gp = vec![0.0; pv.len()];
            for (r, &d) in denoms.iter().enumerate() {
                let span = r * n..(r + 1) * n;
                let diff: Vec<f64> = pv[span.clone()]
                    .iter()
                    .zip(&truth.data()[span.clone()])
                    .map(|(p, u)| p - u)
                    .collect();
                let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    let f = scale / (norm * d);
                    for (dst, dv) in gp[span].iter_mut().zip(diff) {
                        *dst = f * dv;
                    }
                }
            }
            accumulate(nodes, grads, *pred, gp);
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_graph(&self, other: Var<'g>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(shape_err(op, "operands live on different graphs"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let req = self.graph.requires(self.id);
        self.graph.push(value, op, req)
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let req = self.graph.requires(self.id) || self.graph.requires(other.id);
        self.graph.push(value, op, req)
    }

    fn zip_same(&self, other: Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(other, op)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.dtype() != b.dtype() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::with_dtype(a.shape(), a.dtype(), data)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let v = {
            let a = self.value();
            let data = a.data().iter().map(|x| x * s).collect();
            Tensor::with_dtype(a.shape(), a.dtype(), data).expect("same layout")
        };
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Elementwise product of two real tensors.
    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        if self.value().is_complex() || other.value().is_complex() {
            return Err(shape_err("mul", "complex operands not supported"));
        }
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Applies `weight` (`[out, in]`) at every grid point of `self`
    /// (`[..., in, n]`), producing `[..., out, n]`.
    pub fn channel_matmul(&self, weight: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(weight, "channel_matmul")?;
        let v = {
            let (x, w) = (self.value(), weight.value());
            if x.is_complex() || w.is_complex() || x.shape().len() < 2 || w.shape().len() != 2 {
                return Err(shape_err(
                    "channel_matmul",
                    format!("input {:?}, weight {:?}", x.shape(), w.shape()),
                ));
            }
            let (batch, cin, n) = mat_dims(&x);
            let (cout, win) = (w.shape()[0], w.shape()[1]);
            if win != cin {
                return Err(shape_err(
                    "channel_matmul",
                    format!("weight expects {win} channels, input has {cin}"),
                ));
            }
            let mut out = vec![0.0; batch * cout * n];
            for b in 0..batch {
                unsafe {
                    matrixmultiply::dgemm(
                        cout,
                        cin,
                        n,
                        1.0,
                        w.data().as_ptr(),
                        cin as isize,
                        1,
                        x.data()[b * cin * n..].as_ptr(),
                        n as isize,
                        1,
                        0.0,
                        out[b * cout * n..].as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            let mut shape = x.shape().to_vec();
            let r = shape.len() - 2;
            shape[r] = cout;
            Tensor::new(&shape, out)?
        };
        Ok(self.binary(weight, v, Op::ChannelMatmul { w: weight.id, x: self.id }))
    }

    /// Adds `bias[c]` to every point of channel `c` of `[..., c, n]`.
    pub fn bias_add(&self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(bias, "bias_add")?;
        let v = {
            let (x, b) = (self.value(), bias.value());
            if x.is_complex() || x.shape().len() < 2 || b.shape().len() != 1 || b.shape()[0] != x.shape()[x.shape().len() - 2] {
                return Err(shape_err(
                    "bias_add",
                    format!("input {:?}, bias {:?}", x.shape(), b.shape()),
                ));
            }
            let c = b.numel();
            let n = x.last_dim();
            let mut data = x.data().to_vec();
            for (r, row) in data.chunks_exact_mut(n).enumerate() {
                let bv = b.data()[r % c];
                row.iter_mut().for_each(|v| *v += bv);
            }
            Tensor::new(x.shape(), data)?
        };
        Ok(self.binary(bias, v, Op::BiasAdd { x: self.id, b: bias.id }))
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'g>> {
        let v = {
            let x = self.value();
            if x.is_complex() {
                return Err(shape_err("activation", "complex input"));
            }
            if self.graph.requires(self.id) {
                let (vals, deriv) = x.data().iter().map(|&v| kind.apply_with_derivative(v)).unzip();
                (Tensor::new(x.shape(), vals)?, deriv)
            } else {
                (Tensor::new(x.shape(), x.data().iter().map(|&v| kind.apply(v)).collect())?, Vec::new())
            }
        };
        let (v, deriv) = v;
        Ok(self.unary(v, Op::Act { x: self.id, deriv }))
    }

    /// Appends `pad` zeros along the last axis.
    pub fn pad_last(&self, pad: usize) -> Result<Var<'g>> {
        let v = {
            let x = self.value();
            if x.is_complex() || x.shape().is_empty() {
                return Err(shape_err("pad_last", "needs a real tensor of rank >= 1"));
            }
            let n = x.last_dim();
            let mut data = Vec::with_capacity(x.rows() * (n + pad));
            for row in x.data().chunks_exact(n) {
                data.extend_from_slice(row);
                data.extend(std::iter::repeat(0.0).take(pad));
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = n + pad;
            Tensor::new(&shape, data)?
        };
        Ok(self.unary(v, Op::Pad { x: self.id }))
    }

    /// Keeps the first `len` entries of the last axis.
    pub fn crop_last(&self, len: usize) -> Result<Var<'g>> {
        let (v, from) = {
            let x = self.value();
            let from = x.last_dim();
            if x.is_complex() || x.shape().is_empty() || len > from {
                return Err(shape_err(
                    "crop_last",
                    format!("cannot crop {:?} to {len}", x.shape()),
                ));
            }
            let data = x
                .data()
                .chunks_exact(from)
                .flat_map(|row| &row[..len])
                .copied()
                .collect();
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            (Tensor::new(&shape, data)?, from)
        };
        Ok(self.unary(v, Op::Crop { x: self.id, from }))
    }

    pub fn rfft(&self) -> Result<Var<'g>> {
        let (v, n) = {
            let x = self.value();
            (super::rfft(&x)?, x.last_dim())
        };
        Ok(self.unary(v, Op::Rfft { x: self.id, n }))
    }

    pub fn irfft(&self, n: usize) -> Result<Var<'g>> {
        let v = super::irfft(&self.value(), n)?;
        Ok(self.unary(v, Op::Irfft { z: self.id, n }))
    }

    /// First `k` modes of the real DFT along the last axis, as a complex
    /// `[..., k]` tensor. Equal to `rfft` followed by truncation.
    pub fn dft_modes(&self, k: usize) -> Result<Var<'g>> {
        let (v, n) = {
            let x = self.value();
            let n = x.last_dim();
            if x.is_complex() || x.shape().is_empty() || k == 0 || k > spectrum_len(n) {
                return Err(shape_err(
                    "dft_modes",
                    format!("{k} modes from a {:?} {:?} signal", x.dtype(), x.shape()),
                ));
            }
            let rows = x.rows();
            let f = forward_basis(n, k);
            let mut out = vec![0.0; rows * 2 * k];
            gemm(rows, n, 2 * k, x.data(), (n, 1), &f, (2 * k, 1), &mut out);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = k;
            (Tensor::complex(&shape, out)?, n)
        };
        Ok(self.unary(v, Op::DftModes { x: self.id, n, k }))
    }

    /// Length-`n` real signal from the first `k` modes in `self`, all higher
    /// modes taken as zero. Equal to zero-extending and calling `irfft(n)`.
    pub fn idft_modes(&self, n: usize) -> Result<Var<'g>> {
        let (v, k) = {
            let z = self.value();
            let k = if z.shape().is_empty() { 0 } else { z.last_dim() };
            if !z.is_complex() || k == 0 || n == 0 || k > spectrum_len(n) {
                return Err(shape_err(
                    "idft_modes",
                    format!("length {n} from a {:?} {:?} spectrum", z.dtype(), z.shape()),
                ));
            }
            let rows = z.rows();
            let b = inverse_basis(n, k);
            let mut out = vec![0.0; rows * n];
            gemm(rows, 2 * k, n, z.data(), (2 * k, 1), &b, (n, 1), &mut out);
            let mut shape = z.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(&shape, out)?, k)
        };
        Ok(self.unary(v, Op::IdftModes { z: self.id, n, k }))
    }

    /// Per-mode complex channel mixing: `self` is a complex spectrum
    /// `[..., in, m]`, `weight` a real `[in, out, k, 2]` tensor holding
    /// interleaved complex matrices for modes `0..k`. Output modes `>= k`
    /// are zero.
    pub fn spectral_mix(&self, weight: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(weight, "spectral_mix")?;
        let (v, k) = {
            let (z, w) = (self.value(), weight.value());
            let ws = w.shape();
            if !z.is_complex() || z.shape().len() < 2 || w.is_complex() || ws.len() != 4 || ws[3] != 2 {
                return Err(shape_err(
                    "spectral_mix",
                    format!("spectrum {:?}, weight {:?}", z.shape(), ws),
                ));
            }
            let (batch, cin, m) = mat_dims(&z);
            let (win, cout, k) = (ws[0], ws[1], ws[2]);
            if win != cin {
                return Err(shape_err(
                    "spectral_mix",
                    format!("weight expects {win} channels, spectrum has {cin}"),
                ));
            }
            if k > m {
                return Err(Error::Config(format!(
                    "{k} retained modes exceed the {m} available"
                )));
            }
            let (zd, wd) = (z.data(), w.data());
            let mut out = vec![0.0; batch * cout * m * 2];
            for b in 0..batch {
                for i in 0..cin {
                    let zi = 2 * (b * cin + i) * m;
                    for o in 0..cout {
                        let oo = 2 * (b * cout + o) * m;
                        let wo = 2 * (i * cout + o) * k;
                        for q in 0..k {
                            let (zr, zim) = (zd[zi + 2 * q], zd[zi + 2 * q + 1]);
                            let (wr, wim) = (wd[wo + 2 * q], wd[wo + 2 * q + 1]);
                            out[oo + 2 * q] += zr * wr - zim * wim;
                            out[oo + 2 * q + 1] += zr * wim + zim * wr;
                        }
                    }
                }
            }
            let mut shape = z.shape().to_vec();
            let r = shape.len() - 2;
            shape[r] = cout;
            (Tensor::complex(&shape, out)?, k)
        };
        Ok(self.binary(
            weight,
            v,
            Op::SpectralMix {
                z: self.id,
                w: weight.id,
                modes: k,
            },
        ))
    }

    /// Sum of all elements of a real tensor.
    pub fn sum(&self) -> Result<Var<'g>> {
        let s = {
            let x = self.value();
            if x.is_complex() {
                return Err(shape_err("sum", "complex input"));
            }
            x.data().iter().sum()
        };
        Ok(self.unary(Tensor::scalar(s), Op::Sum(self.id)))
    }

    /// Mean over rows of `||pred_r - truth_r||_2 / denom_r`, where a row is a
    /// slice along the last axis. `denoms` holds one positive value per row.
    pub fn relative_l2(&self, truth: Tensor, denoms: Vec<f64>) -> Result<Var<'g>> {
        let loss = {
            let p = self.value();
            if p.shape() != truth.shape() || p.is_complex() || truth.is_complex() {
                return Err(shape_err(
                    "relative_l2",
                    format!("prediction {:?}, truth {:?}", p.shape(), truth.shape()),
                ));
            }
            if denoms.len() != p.rows() || denoms.iter().any(|d| !(*d > 0.0)) {
                return Err(shape_err(
                    "relative_l2",
                    "need one positive denominator per row",
                ));
            }
            let n = p.last_dim();
            let total: f64 = p
                .data()
                .chunks_exact(n)
                .zip(truth.data().chunks_exact(n))
                .zip(&denoms)
                .map(|((pr, ur), d)| {
                    pr.iter().zip(ur).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / d
                })
                .sum();
            total / denoms.len() as f64
        };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::RelativeL2 {
                pred: self.id,
                truth,
                denoms,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite-difference check of `f` with respect to every input.
    fn check_grads(inputs: Vec<Tensor>, f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>) {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out).unwrap();
        let eval = |inputs: &[Tensor]| {
            let g = Graph::new();
            let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let v = f(&g, &vars).value().item().unwrap();
            v
        };
        let h = 1e-6;
        for (idx, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).unwrap().data().to_vec();
            for j in 0..t.data().len() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-4, "input {idx}[{j}]: analytic {a}, fd {fd}");
            }
        }
    }

    #[test]
    fn sum_of_squares() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.mul(x).unwrap().sum().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = g.constant(Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap());
        let y = c.sum().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x.scale(2.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_channel_matmul() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 5], &mut rng);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(Tensor::new(&[3, 3], eye).unwrap());
        let y = g.constant(x.clone()).channel_matmul(w).unwrap();
        assert_eq!(&*y.value(), &x);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[3, 7], &mut rng);
        let y = g.constant(x.clone()).pad_last(5).unwrap();
        assert_eq!(y.shape(), vec![3, 12]);
        assert_eq!(&*y.crop_last(7).unwrap().value(), &x);
    }

    #[test]
    fn activation_definitions() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::LeakyRelu(0.01).apply(-1.0) + 0.01).abs() < 1e-15);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert!((Activation::Tanh.apply(0.5) - 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[3, 2]));
        match a.add(b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("unexpected {other:?}"),
        }
        let w = g.leaf(Tensor::zeros(&[3, 4]));
        match a.channel_matmul(w) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "channel_matmul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[2, 4], &mut rng);
        let b = rand_tensor(&[2, 4], &mut rng);
        check_grads(vec![a.clone(), b.clone()], |_, v| {
            let s = v[0].add(v[1]).unwrap().mul(v[0]).unwrap();
            let d = s.sub(v[1].scale(0.3)).unwrap();
            d.mul(d).unwrap().sum().unwrap()
        });
    }

    #[test]
    fn fd_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // keep away from the kinks of relu-type functions
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.5);
                if rng.gen_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = Tensor::new(&[3, 4], data).unwrap();
        let w = rand_tensor(&[3, 4], &mut rng);
        for kind in [
            Activation::Gelu,
            Activation::LeakyRelu(0.01),
            Activation::Relu,
            Activation::Tanh,
        ] {
            check_grads(vec![x.clone(), w.clone()], move |_, v| {
                v[0].activation(kind).unwrap().mul(v[1]).unwrap().sum().unwrap()
            });
        }
    }

    #[test]
    fn fd_matmul_bias_pad_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 3, 6], &mut rng);
        let w = rand_tensor(&[4, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let probe = rand_tensor(&[2, 4, 5], &mut rng);
        check_grads(vec![x, w, b, probe], |_, v| {
            let y = v[0].channel_matmul(v[1]).unwrap().bias_add(v[2]).unwrap();
            let y = y.pad_last(3).unwrap().crop_last(5).unwrap();
            y.mul(v[3]).unwrap().sum().unwrap()
        });
    }

    #[test]
    fn fd_spectral_path() {
        // sum(irfft(R . rfft(x))) weighted by a probe so every mode matters
        for n in [8, 9] {
            let mut rng = ChaCha8Rng::seed_from_u64(6 + n as u64);
            let x = rand_tensor(&[2, 2, n], &mut rng);
            let r = rand_tensor(&[2, 3, 3, 2], &mut rng);
            let probe = rand_tensor(&[2, 3, n], &mut rng);
            check_grads(vec![x.clone(), r.clone(), probe], move |_, v| {
                let s = v[0].rfft().unwrap().spectral_mix(v[1]).unwrap();
                s.irfft(n).unwrap().mul(v[2]).unwrap().sum().unwrap()
            });
            check_grads(vec![x, r], move |_, v| {
                let s = v[0].rfft().unwrap().spectral_mix(v[1]).unwrap();
                s.irfft(n).unwrap().sum().unwrap()
            });
        }
    }

    #[test]
    fn truncated_dft_matches_full_path() {
        for (n, k) in [(8, 5), (9, 5), (12, 3), (7, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + n as u64);
            let x = rand_tensor(&[2, 3, n], &mut rng);
            let r = rand_tensor(&[3, 2, k, 2], &mut rng);
            let g = Graph::new();
            let (xv, rv) = (g.constant(x), g.constant(r));
            let full = xv.rfft().unwrap().spectral_mix(rv).unwrap().irfft(n).unwrap();
            let modes = xv.dft_modes(k).unwrap();
            let spec = xv.rfft().unwrap();
            for row in 0..6 {
                for q in 0..k {
                    for c in 0..2 {
                        let a = modes.value().data()[row * 2 * k + 2 * q + c];
                        let b = spec.value().data()[row * 2 * spectrum_len(n) + 2 * q + c];
                        assert!((a - b).abs() < 1e-12, "n {n} mode {q}");
                    }
                }
            }
            let trunc = modes.spectral_mix(rv).unwrap().idft_modes(n).unwrap();
            for (a, b) in full.value().data().iter().zip(trunc.value().data()) {
                assert!((a - b).abs() < 1e-12, "n {n} k {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fd_truncated_dft() {
        for (n, k) in [(8, 5), (9, 4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + n as u64);
            let x = rand_tensor(&[2, 2, n], &mut rng);
            let r = rand_tensor(&[2, 3, k, 2], &mut rng);
            let probe = rand_tensor(&[2, 3, n], &mut rng);
            check_grads(vec![x, r, probe], move |_, v| {
                let s = v[0].dft_modes(k).unwrap().spectral_mix(v[1]).unwrap();
                s.idft_modes(n).unwrap().mul(v[2]).unwrap().sum().unwrap()
            });
        }
    }

    #[test]
    fn truncated_dft_rejects_too_many_modes() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 8]));
        assert!(matches!(x.dft_modes(6), Err(Error::Shape { .. })));
        let z = x.dft_modes(5).unwrap();
        assert!(matches!(z.idft_modes(7), Err(Error::Shape { .. })));
    }

    #[test]
    fn fd_relative_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = rand_tensor(&[2, 3, 5], &mut rng);
        let truth = rand_tensor(&[2, 3, 5], &mut rng);
        let denoms: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
        check_grads(vec![p], move |_, v| {
            v[0].relative_l2(truth.clone(), denoms.clone()).unwrap()
        });
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let g = Graph::new();
            let x = g.leaf(rand_tensor(&[2, 3, 16], &mut rng));
            let r = g.leaf(rand_tensor(&[3, 3, 4, 2], &mut rng));
            let w = g.leaf(rand_tensor(&[3, 3], &mut rng));
            let s = x.rfft().unwrap().spectral_mix(r).unwrap().irfft(16).unwrap();
            let y = x.channel_matmul(w).unwrap().add(s).unwrap();
            let y = y.activation(Activation::Gelu).unwrap();
            let loss = y.mul(y).unwrap().sum().unwrap();
            let grads = g.backward(loss).unwrap();
            [x, r, w].map(|v| grads.get(v).unwrap().data().to_vec())
        };
        let (a, b) = (run(), run());
        for (ga, gb) in a.iter().zip(&b) {
            assert!(ga.iter().zip(gb).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
