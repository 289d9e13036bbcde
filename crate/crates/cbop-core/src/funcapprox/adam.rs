//! Adam with bias correction, one state per network.

use super::net::{DenseNet, Gradients};
use crate::error::{CbopError, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &DenseNet) -> Self {
        let zeros = |shape: &DenseNet, bias: bool| -> Vec<Vec<f64>> {
            (0..shape.num_layers())
                .map(|l| {
                    let n = if bias {
                        shape.sizes()[l + 1]
                    } else {
                        shape.sizes()[l] * shape.sizes()[l + 1]
                    };
                    vec![0.0; n]
                })
                .collect()
        };
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m_w: zeros(net, false),
            v_w: zeros(net, false),
            m_b: zeros(net, true),
            v_b: zeros(net, true),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Rejects non-finite gradients before touching any state,
    /// so a poisoned batch leaves both net and optimizer untouched.
    pub fn apply(&mut self, net: &mut DenseNet, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(CbopError::non_finite("adam gradient"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for l in 0..net.num_layers() {
            Self::update_block(
                net.weights_mut(l),
                &grads.weights[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
            Self::update_block(
                net.bias_mut(l),
                &grads.biases[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn update_block(
        params: &mut [f64],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        bc1: f64,
        bc2: f64,
    ) {
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }

    // ---- flat moment access (checkpointing) ----------------------------

    pub fn moments_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.m_w.len() {
            out.extend_from_slice(&self.m_w[l]);
            out.extend_from_slice(&self.v_w[l]);
            out.extend_from_slice(&self.m_b[l]);
            out.extend_from_slice(&self.v_b[l]);
        }
        out
    }

    pub fn set_moments_flat(&mut self, step: u64, flat: &[f64]) -> Result<()> {
        let want: usize = self
            .m_w
            .iter()
            .zip(&self.m_b)
            .map(|(w, b)| 2 * (w.len() + b.len()))
            .sum();
        if flat.len() != want {
            return Err(CbopError::shape("adam moments", want, flat.len()));
        }
        self.step = step;
        let mut off = 0;
        for l in 0..self.m_w.len() {
            for block in [&mut self.m_w[l], &mut self.v_w[l], &mut self.m_b[l], &mut self.v_b[l]] {
                let n = block.len();
                block.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }
}
