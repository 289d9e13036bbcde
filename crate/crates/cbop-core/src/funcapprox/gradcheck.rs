//! Finite-difference verification of the analytic backward pass.
//!
//! Training bugs in hand-written backprop are silent; this module exists so
//! both the test suite and anyone extending the kernels can check parameter
//! gradients of a scalar loss against central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::activation::{Hidden, Output};
use super::net::{DenseNet, Gradients};
use crate::error::Result;
use crate::mat::Mat;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// worst relative error over all parameters
    pub max_rel_error: f64,
    /// parameter count checked
    pub params: usize,
}

/// Relative error with an absolute floor, symmetric in its arguments.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn flatten(net: &DenseNet, grads: &Gradients) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.num_params());
    for l in 0..net.num_layers() {
        out.extend_from_slice(&grads.weights[l]);
        out.extend_from_slice(&grads.biases[l]);
    }
    out
}

/// Check d(sum of squared errors)/dθ for `net` on batch `x` against targets
/// `t`, using central differences with step `eps`. Returns the worst relative
/// error; the caller decides what to accept.
pub fn check_sse_gradients(net: &DenseNet, x: &Mat, t: &Mat, eps: f64) -> Result<GradcheckReport> {
    let loss = |n: &DenseNet| -> Result<f64> {
        let y = n.forward(x)?;
        let mut s = 0.0;
        for (a, b) in y.data().iter().zip(t.data()) {
            let d = a - b;
            s += d * d;
        }
        Ok(0.5 * s)
    };

    let cache = net.forward_cached(x)?;
    let mut upstream = cache.output().clone();
    for (u, tv) in upstream.data_mut().iter_mut().zip(t.data()) {
        *u -= tv;
    }
    let mut grads = Gradients::zeros_like(net);
    net.backward(&cache, &upstream, &mut grads)?;
    let analytic = flatten(net, &grads);

    let flat = net.params_flat();
    let mut max_rel = 0.0f64;
    for p in 0..flat.len() {
        let mut fp = flat.clone();
        fp[p] += eps;
        let mut plus = net.clone();
        plus.set_params_flat(&fp)?;
        fp[p] -= 2.0 * eps;
        let mut minus = net.clone();
        minus.set_params_flat(&fp)?;
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * eps);
        max_rel = max_rel.max(rel_error(analytic[p], fd));
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        params: flat.len(),
    })
}

/// Build a random small net plus a batch whose pre-activations stay clear of
/// the relu kink, so finite differencing is well posed for every activation.
pub fn random_case(rng: &mut ChaCha8Rng) -> (DenseNet, Mat, Mat) {
    let hidden = [Hidden::Relu, Hidden::Tanh, Hidden::Swish][rng.random_range(0..3usize)];
    let output = [Output::Identity, Output::Tanh][rng.random_range(0..2usize)];
    let in_dim = rng.random_range(1..5usize);
    let out_dim = rng.random_range(1..4usize);
    let h1 = rng.random_range(3..8usize);
    let h2 = rng.random_range(3..8usize);
    let sizes = [in_dim, h1, h2, out_dim];
    let rows = rng.random_range(1..5usize);

    'outer: loop {
        let net = DenseNet::new(&sizes, hidden, output, rng);
        let x = Mat::from_vec(
            rows,
            in_dim,
            (0..rows * in_dim)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        );
        // resample if any hidden pre-activation sits near the relu kink
        if hidden == Hidden::Relu {
            let cache = net.forward_cached(&x).expect("dims fixed above");
            for l in 0..net.num_layers() - 1 {
                for i in 0..rows {
                    if cache_pre_near_zero(&cache, l, i) {
                        continue 'outer;
                    }
                }
            }
        }
        let t = Mat::from_vec(
            rows,
            out_dim,
            (0..rows * out_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        );
        return (net, x, t);
    }
}

fn cache_pre_near_zero(cache: &super::net::ForwardCache, layer: usize, row: usize) -> bool {
    cache.pre(layer).row(row).iter().any(|v| v.abs() < 1e-3)
}
