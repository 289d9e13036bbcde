//! Stochastic policy: a network emitting per-dimension Gaussian mean and
//! log-std, squashed through tanh onto the action box. The log-std head is
//! mapped smoothly into [-5, 2] so gradients never die at the clamp.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bayesmve::Policy;
use crate::error::{CbopError, Result};
use crate::funcapprox::{DenseNet, Hidden, Output};
use crate::mat::Mat;
use crate::rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// tanh output is clipped just inside ±1 so squashed actions stay strictly
/// interior to the box
const TANH_SAT: f64 = 1.0 - 1e-9;
/// guard inside ln(1 - tanh²) of the squash correction
pub const SQUASH_EPS: f64 = 1e-6;

/// Smooth map from the raw head output to a bounded log-std.
#[inline]
pub fn logstd_map(x: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (x.tanh() + 1.0)
}

#[inline]
pub fn logstd_map_deriv(x: f64) -> f64 {
    let t = x.tanh();
    0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t)
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    net: DenseNet,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub entropy_temperature: f64,
    act_mid: Vec<f64>,
    act_half: Vec<f64>,
}

impl PolicyNet {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        act_low: &[f64],
        act_high: &[f64],
        entropy_temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        if act_low.len() != act_dim || act_high.len() != act_dim {
            return Err(CbopError::shape("policy action box", act_dim, act_low.len()));
        }
        if act_low.iter().zip(act_high).any(|(lo, hi)| !(lo < hi)) {
            return Err(CbopError::InvalidConfig(
                "policy action box must have low < high per dimension".into(),
            ));
        }
        if !(entropy_temperature.is_finite() && entropy_temperature >= 0.0) {
            return Err(CbopError::InvalidConfig(format!(
                "entropy temperature must be finite and >= 0, got {entropy_temperature}"
            )));
        }
        let sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(2 * act_dim))
            .collect();
        let mut r = rng::stream(seed, &[rng::tags::POLICY_INIT]);
        let mut net = DenseNet::new(&sizes, Hidden::Relu, Output::Identity, &mut r);

        // start the log-std head near exp(-1): shift its biases so the
        // smooth clamp maps a zero pre-activation to -1
        let bias_shift = (4.0f64 / 3.0).ln() / 2.0; // atanh(1/7)
        let last = net.num_layers() - 1;
        for j in 0..act_dim {
            net.bias_mut(last)[act_dim + j] = bias_shift;
        }

        Ok(PolicyNet {
            net,
            obs_dim,
            act_dim,
            entropy_temperature,
            act_mid: act_low
                .iter()
                .zip(act_high)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
            act_half: act_low
                .iter()
                .zip(act_high)
                .map(|(lo, hi)| 0.5 * (hi - lo))
                .collect(),
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn act_mid(&self) -> &[f64] {
        &self.act_mid
    }

    pub fn act_half(&self) -> &[f64] {
        &self.act_half
    }

    /// Squash a pre-tanh value onto action dimension j.
    #[inline]
    pub fn squash(&self, j: usize, u: f64) -> f64 {
        self.act_mid[j] + self.act_half[j] * u.tanh().clamp(-TANH_SAT, TANH_SAT)
    }

    /// Deterministic head: tanh of the mean, scaled to the box.
    pub fn act_mean(&self, states: &Mat) -> Result<Mat> {
        let out = self.net.forward(states)?;
        let mut actions = Mat::zeros(states.rows(), self.act_dim);
        for i in 0..states.rows() {
            let row = out.row(i);
            let a = actions.row_mut(i);
            for j in 0..self.act_dim {
                a[j] = self.squash(j, row[j]);
            }
        }
        Ok(actions)
    }

    pub fn act_mean_one(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut m = Mat::zeros(1, state.len());
        m.row_mut(0).copy_from_slice(state);
        Ok(self.act_mean(&m)?.row(0).to_vec())
    }

    /// Stochastic sample; draws consume the rng row by row, dimension by
    /// dimension.
    pub fn sample(&self, states: &Mat, rng: &mut ChaCha8Rng) -> Result<Mat> {
        let out = self.net.forward(states)?;
        let mut actions = Mat::zeros(states.rows(), self.act_dim);
        for i in 0..states.rows() {
            let row = out.row(i);
            let a = actions.row_mut(i);
            for j in 0..self.act_dim {
                let sigma = logstd_map(row[self.act_dim + j]).exp();
                let eps: f64 = StandardNormal.sample(rng);
                a[j] = self.squash(j, row[j] + sigma * eps);
            }
        }
        Ok(actions)
    }
}

impl Policy for PolicyNet {
    fn act_batch(&self, states: &Mat, rng: &mut ChaCha8Rng) -> Result<Mat> {
        self.sample(states, rng)
    }
}
