//! Fully-connected networks in plain `f64` with explicit forward, backward,
//! and differentiate-through-input-gradient passes.
//!
//! Batched entry points loop over rows and feed each row through the same
//! kernels as the single-row path, with a fixed accumulation order. Running
//! rows one at a time or stacked in a batch therefore produces bit-identical
//! results, which keeps training runs reproducible regardless of how callers
//! chunk their data.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::activation::{Hidden, Output};
use crate::error::{CbopError, Result};
use crate::mat::Mat;

/// Multi-layer perceptron. Weights for each layer are stored row-major by
/// input index: `w[k * out + j]` connects input `k` to output `j`.
#[derive(Debug, Clone)]
pub struct DenseNet {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden: Hidden,
    output: Output,
}

/// Per-layer parameter gradients, shaped like the net that produced them.
/// Backward passes accumulate, so one buffer can collect several loss terms.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|v| v.is_finite())
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Flattened in the same order as [`DenseNet::params_flat`]: per layer,
    /// weights then bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Intermediate state kept by [`DenseNet::forward_cached`] for the backward
/// pass: the input batch plus pre- and post-activation values per layer.
#[derive(Debug)]
pub struct ForwardCache {
    input: Mat,
    pre: Vec<Mat>,
    post: Vec<Mat>,
}

impl ForwardCache {
    pub fn output(&self) -> &Mat {
        self.post.last().expect("net has at least one layer")
    }

    pub fn input(&self) -> &Mat {
        &self.input
    }

    /// Pre-activation values of layer `l`.
    pub fn pre(&self, l: usize) -> &Mat {
        &self.pre[l]
    }
}

// ---- row kernels ------------------------------------------------------
// The fixed loop order here defines the crate's floating-point semantics.

/// out = x * W + b for one row.
#[inline]
fn affine_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    out.copy_from_slice(b);
    let od = out.len();
    for (k, &xk) in x.iter().enumerate() {
        let wrow = &w[k * od..(k + 1) * od];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xk * wv;
        }
    }
}

/// out[k] = sum_j w[k*od+j] * u[j]  (W applied from the left: W u).
#[inline]
fn matvec_row(w: &[f64], u: &[f64], out: &mut [f64]) {
    let od = u.len();
    for (k, o) in out.iter_mut().enumerate() {
        let wrow = &w[k * od..(k + 1) * od];
        let mut acc = 0.0;
        for (wv, uv) in wrow.iter().zip(u) {
            acc += wv * uv;
        }
        *o = acc;
    }
}

/// dw[k*od+j] += a[k] * d[j]; accumulated in ascending k, then j.
#[inline]
fn outer_acc(dw: &mut [f64], a: &[f64], d: &[f64]) {
    let od = d.len();
    for (k, &ak) in a.iter().enumerate() {
        let dwrow = &mut dw[k * od..(k + 1) * od];
        for (dst, &dv) in dwrow.iter_mut().zip(d) {
            *dst += ak * dv;
        }
    }
}

/// out[j] += sum_k r[k] * w[k*od+j]  (transpose application: W^T r).
#[inline]
fn vecmat_acc(w: &[f64], r: &[f64], out: &mut [f64]) {
    let od = out.len();
    for (k, &rk) in r.iter().enumerate() {
        let wrow = &w[k * od..(k + 1) * od];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += rk * wv;
        }
    }
}

impl DenseNet {
    /// Fresh net with fan-in scaled uniform weights (`U(-1/sqrt(n_in), 1/sqrt(n_in))`)
    /// and zero biases. `sizes` runs input to output, e.g. `[4, 32, 32, 2]`.
    pub fn new(sizes: &[usize], hidden: Hidden, output: Output, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            sizes.len() >= 2 && sizes.iter().all(|&s| s > 0),
            "layer sizes must list input and output dims, all nonzero: {sizes:?}"
        );
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        DenseNet {
            sizes: sizes.to_vec(),
            weights,
            biases,
            hidden,
            output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden_activation(&self) -> Hidden {
        self.hidden
    }

    pub fn output_activation(&self) -> Output {
        self.output
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    fn check_input(&self, x: &Mat, context: &str) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(CbopError::shape(
                context,
                format!("input width {}", self.in_dim()),
                format!("width {}", x.cols()),
            ));
        }
        Ok(())
    }

    /// Apply the layer activation in place. `last` selects the output map.
    fn activate(&self, pre: &Mat, last: bool) -> Mat {
        let mut out = pre.clone();
        if last {
            for v in out.data_mut() {
                *v = self.output.apply(*v);
            }
        } else {
            for v in out.data_mut() {
                *v = self.hidden.apply(*v);
            }
        }
        out
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x, "dense net forward")?;
        let rows = x.rows();
        let nl = self.num_layers();
        let mut cur = x.clone();
        for l in 0..nl {
            let mut nxt = Mat::zeros(rows, self.sizes[l + 1]);
            for i in 0..rows {
                affine_row(cur.row(i), &self.weights[l], &self.biases[l], nxt.row_mut(i));
            }
            if l == nl - 1 {
                for v in nxt.data_mut() {
                    *v = self.output.apply(*v);
                }
            } else {
                for v in nxt.data_mut() {
                    *v = self.hidden.apply(*v);
                }
            }
            cur = nxt;
        }
        Ok(cur)
    }

    /// Single-row convenience wrapper.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward(&Mat::from_row(x))?;
        Ok(out.row(0).to_vec())
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<ForwardCache> {
        self.check_input(x, "dense net forward")?;
        let nl = self.num_layers();
        let rows = x.rows();
        let mut pre = Vec::with_capacity(nl);
        let mut post = Vec::with_capacity(nl);
        for l in 0..nl {
            let src = if l == 0 { x } else { &post[l - 1] };
            let mut a = Mat::zeros(rows, self.sizes[l + 1]);
            for i in 0..rows {
                affine_row(src.row(i), &self.weights[l], &self.biases[l], a.row_mut(i));
            }
            let z = self.activate(&a, l == nl - 1);
            pre.push(a);
            post.push(z);
        }
        Ok(ForwardCache {
            input: x.clone(),
            pre,
            post,
        })
    }

    /// Reverse pass. `upstream` holds dLoss/dOutput per row; parameter
    /// gradients are accumulated into `grads` (summed over rows in ascending
    /// row order) and dLoss/dInput is returned.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Mat, grads: &mut Gradients) -> Result<Mat> {
        let nl = self.num_layers();
        let rows = cache.input.rows();
        if upstream.rows() != rows || upstream.cols() != self.out_dim() {
            return Err(CbopError::shape(
                "dense net backward",
                format!("upstream {}x{}", rows, self.out_dim()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut dx = Mat::zeros(rows, self.in_dim());
        let mut d = vec![0.0; self.sizes.iter().copied().max().unwrap()];
        let mut dprev = d.clone();
        for i in 0..rows {
            // output layer: chain through the output activation
            {
                let a = cache.pre[nl - 1].row(i);
                let up = upstream.row(i);
                for j in 0..a.len() {
                    d[j] = up[j] * self.output.deriv(a[j]);
                }
            }
            for l in (0..nl).rev() {
                let od = self.sizes[l + 1];
                let id = self.sizes[l];
                let src = if l == 0 {
                    cache.input.row(i)
                } else {
                    cache.post[l - 1].row(i)
                };
                for (b, &dv) in grads.biases[l].iter_mut().zip(&d[..od]) {
                    *b += dv;
                }
                outer_acc(&mut grads.weights[l], src, &d[..od]);
                if l == 0 {
                    matvec_row(&self.weights[0], &d[..od], dx.row_mut(i));
                } else {
                    matvec_row(&self.weights[l], &d[..od], &mut dprev[..id]);
                    let a_prev = cache.pre[l - 1].row(i);
                    for k in 0..id {
                        dprev[k] *= self.hidden.deriv(a_prev[k]);
                    }
                    std::mem::swap(&mut d, &mut dprev);
                }
            }
        }
        Ok(dx)
    }

    /// Gradient of the scalar output with respect to the input, per row.
    /// Only defined for single-output nets.
    pub fn scalar_input_gradients(&self, x: &Mat) -> Result<Mat> {
        let (grads, _) = self.input_grad_pass(x, None)?;
        Ok(grads)
    }

    /// Differentiates a function of the input gradient with respect to the
    /// net parameters. `adjoint` holds dP/d(input gradient) per row, where P
    /// is any scalar built from the per-row input gradients `g_i = dy/dx_i`.
    /// Parameter gradients accumulate into `grads`; the input gradients
    /// themselves are returned so callers can form P and its adjoint from the
    /// same pass.
    pub fn scalar_input_grad_backward(
        &self,
        x: &Mat,
        adjoint: &Mat,
        grads: &mut Gradients,
    ) -> Result<Mat> {
        let (g, _) = self.input_grad_pass(x, Some((adjoint, grads)))?;
        Ok(g)
    }

    /// Shared machinery for the input-gradient pass and its adjoint.
    ///
    /// Forward: `a_l = z_{l-1} W_l + b_l`, `z_l = f(a_l)`. The input gradient
    /// of the scalar output is computed by the recursion `u_L = f_out'(a_L)`,
    /// `v_{l-1} = W_l u_l`, `u_{l-1} = v_{l-1} ∘ f'(a_{l-1})`, `g = W_1 u_1`
    /// (down to the input). When an adjoint `r = dP/dg` is supplied, the same
    /// recursion is differentiated: ascending layers propagate `r` through
    /// each `W_l` (yielding one weight-gradient term per layer plus a pre-
    /// activation term via `f''`), and a final descending pass pushes the
    /// collected pre-activation terms through the ordinary forward structure.
    fn input_grad_pass(
        &self,
        x: &Mat,
        mut adjoint: Option<(&Mat, &mut Gradients)>,
    ) -> Result<(Mat, ())> {
        self.check_input(x, "input gradient pass")?;
        if self.out_dim() != 1 {
            return Err(CbopError::shape(
                "input gradient pass",
                "single-output net",
                format!("{} outputs", self.out_dim()),
            ));
        }
        if let Some((adj, _)) = &adjoint {
            if adj.rows() != x.rows() || adj.cols() != self.in_dim() {
                return Err(CbopError::shape(
                    "input gradient adjoint",
                    format!("{}x{}", x.rows(), self.in_dim()),
                    format!("{}x{}", adj.rows(), adj.cols()),
                ));
            }
        }
        let cache = self.forward_cached(x)?;
        let nl = self.num_layers();
        let mut g = Mat::zeros(x.rows(), self.in_dim());

        // scratch, sized to the widest layer
        let width = self.sizes.iter().copied().max().unwrap();
        let mut u: Vec<Vec<f64>> = self.sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
        let mut v: Vec<Vec<f64>> = self.sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
        let mut scratch = vec![0.0; width];

        for i in 0..x.rows() {
            // descent: u_l = dy/da_l along the input-gradient recursion
            {
                let a_last = cache.pre[nl - 1].row(i);
                u[nl - 1][0] = self.output.deriv(a_last[0]);
            }
            for l in (0..nl - 1).rev() {
                let (lo, hi) = u.split_at_mut(l + 1);
                matvec_row(&self.weights[l + 1], &hi[0], &mut v[l]);
                let a = cache.pre[l].row(i);
                for k in 0..v[l].len() {
                    lo[l][k] = v[l][k] * self.hidden.deriv(a[k]);
                }
            }
            matvec_row(&self.weights[0], &u[0], g.row_mut(i));

            let Some((adj, grads)) = adjoint.as_mut() else {
                continue;
            };

            // ascend: push dP/dg through the recursion above.
            // r holds dP/dv_{l-1} entering layer l; s_l collects dP/da_l.
            let mut s: Vec<Vec<f64>> = self.sizes[1..].iter().map(|&w| vec![0.0; w]).collect();
            let mut r: Vec<f64> = adj.row(i).to_vec();
            for l in 0..nl {
                let od = self.sizes[l + 1];
                let ru = &mut scratch[..od];
                ru.fill(0.0);
                vecmat_acc(&self.weights[l], &r, ru);
                outer_acc(&mut grads.weights[l], &r, &u[l]);
                let a = cache.pre[l].row(i);
                if l == nl - 1 {
                    for j in 0..od {
                        s[l][j] += ru[j] * self.output.second_deriv(a[j]);
                    }
                } else {
                    for j in 0..od {
                        s[l][j] += ru[j] * v[l][j] * self.hidden.second_deriv(a[j]);
                    }
                    r.resize(od, 0.0);
                    for j in 0..od {
                        r[j] = ru[j] * self.hidden.deriv(a[j]);
                    }
                }
            }

            // final descend: route the dP/da_l terms through the forward
            // structure exactly like an ordinary backward pass.
            let mut t = s[nl - 1].clone();
            for l in (0..nl).rev() {
                let od = self.sizes[l + 1];
                let id = self.sizes[l];
                let src = if l == 0 {
                    cache.input.row(i)
                } else {
                    cache.post[l - 1].row(i)
                };
                for (b, &tv) in grads.biases[l].iter_mut().zip(&t[..od]) {
                    *b += tv;
                }
                outer_acc(&mut grads.weights[l], src, &t[..od]);
                if l > 0 {
                    let dz = &mut scratch[..id];
                    matvec_row(&self.weights[l], &t[..od], dz);
                    let a_prev = cache.pre[l - 1].row(i);
                    let mut next = s[l - 1].clone();
                    for k in 0..id {
                        next[k] += dz[k] * self.hidden.deriv(a_prev[k]);
                    }
                    t = next;
                }
            }
        }
        Ok((g, ()))
    }

    // ---- flat parameter access (checkpointing) -------------------------

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Layer order: weights then bias for layer 0, then layer 1, ...
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in 0..self.num_layers() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CbopError::shape(
                "set_params_flat",
                self.num_params(),
                flat.len(),
            ));
        }
        let mut off = 0;
        for l in 0..self.num_layers() {
            let wl = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(())
    }

    pub fn params_are_finite(&self) -> bool {
        self.weights.iter().flatten().all(|v| v.is_finite())
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}
