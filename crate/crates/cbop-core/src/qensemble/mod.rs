//! Ensemble of M independent scalar critics over (state, action) pairs,
//! each with a slowly tracking target copy, plus a diversity regularizer
//! that pushes the heads' action-gradient directions apart.

use crate::error::{CbopError, Result};
use crate::funcapprox::{DenseNet, Gradients, Hidden, Output};
use crate::mat::Mat;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

#[derive(Debug, Clone)]
pub struct QEnsemble {
    online: Vec<DenseNet>,
    target: Vec<DenseNet>,
    pub m: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
}

/// Guard inside the cosine denominators; keeps zero-gradient heads finite.
const COS_EPS: f64 = 1e-12;

impl QEnsemble {
    /// M heads, each a fresh network over the concatenated (s, a) input,
    /// initialized from its own seeded stream. Targets start as exact
    /// copies of their online heads.
    pub fn new(
        m: usize,
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        activation: Hidden,
        seed: u64,
    ) -> Result<Self> {
        if m == 0 {
            return Err(CbopError::InvalidConfig(
                "Q ensemble needs at least one head".into(),
            ));
        }
        if obs_dim == 0 || act_dim == 0 {
            return Err(CbopError::InvalidConfig(
                "Q ensemble needs positive obs/act dims".into(),
            ));
        }
        let sizes: Vec<usize> = std::iter::once(obs_dim + act_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let mut online = Vec::with_capacity(m);
        for head in 0..m {
            let mut r = rng::stream(seed, &[rng::tags::Q_INIT, head as u64]);
            online.push(DenseNet::new(&sizes, activation, Output::Identity, &mut r));
        }
        let target = online.clone();
        Ok(QEnsemble {
            online,
            target,
            m,
            obs_dim,
            act_dim,
        })
    }

    pub fn heads(&self) -> &[DenseNet] {
        &self.online
    }

    pub fn head_mut(&mut self, m: usize) -> &mut DenseNet {
        &mut self.online[m]
    }

    pub fn targets(&self) -> &[DenseNet] {
        &self.target
    }

    pub fn target_mut(&mut self, m: usize) -> &mut DenseNet {
        &mut self.target[m]
    }

    /// Concatenate state and action batches into network input rows.
    pub fn pair_input(&self, states: &Mat, actions: &Mat) -> Result<Mat> {
        if states.cols() != self.obs_dim {
            return Err(CbopError::shape("q states", self.obs_dim, states.cols()));
        }
        if actions.cols() != self.act_dim {
            return Err(CbopError::shape("q actions", self.act_dim, actions.cols()));
        }
        Ok(Mat::hcat(states, actions))
    }

    /// Scalar values of one head over a batch of (s, a) rows.
    pub fn q_values(&self, head: usize, input: &Mat, which: Which) -> Result<Vec<f64>> {
        let net = match which {
            Which::Online => &self.online[head],
            Which::Target => &self.target[head],
        };
        let out = net.forward(input)?;
        Ok((0..out.rows()).map(|i| out.row(i)[0]).collect())
    }

    /// All heads at once; rows = samples, cols = heads.
    pub fn q_values_all(&self, input: &Mat, which: Which) -> Result<Mat> {
        let mut out = Mat::zeros(input.rows(), self.m);
        for h in 0..self.m {
            let col = self.q_values(h, input, which)?;
            for (i, v) in col.into_iter().enumerate() {
                out.row_mut(i)[h] = v;
            }
        }
        Ok(out)
    }

    /// Polyak step: target <- (1 - rate) * target + rate * online, so the
    /// target's lag from a frozen online head contracts by (1 - rate).
    pub fn soft_update(&mut self, rate: f64) {
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            let mut p = t.params_flat();
            let q = o.params_flat();
            for (pv, qv) in p.iter_mut().zip(&q) {
                *pv += rate * (qv - *pv);
            }
            t.set_params_flat(&p).expect("same architecture");
        }
    }

    pub fn hard_sync(&mut self) {
        self.target = self.online.clone();
    }

    /// Mean pairwise cosine similarity between the heads' action-gradient
    /// directions, averaged over the batch, together with its gradient with
    /// respect to each head's parameters. One head (or an empty batch)
    /// yields zero with zero gradients.
    pub fn diversity_penalty(&self, input: &Mat) -> Result<(f64, Vec<Gradients>)> {
        let mut grads: Vec<Gradients> = self.online.iter().map(Gradients::zeros_like).collect();
        let b = input.rows();
        if self.m < 2 || b == 0 {
            return Ok((0.0, grads));
        }
        let od = self.obs_dim;
        let ad = self.act_dim;
        if input.cols() != od + ad {
            return Err(CbopError::shape("penalty input", od + ad, input.cols()));
        }

        // pass 1: action-gradients g[m] for every head over the batch
        let mut g: Vec<Mat> = Vec::with_capacity(self.m);
        for net in &self.online {
            g.push(net.scalar_input_gradients(input)?);
        }

        let pairs = (self.m * (self.m - 1) / 2) as f64;
        let scale = 1.0 / (pairs * b as f64);
        let norm_of = |v: &[f64]| -> f64 {
            let s: f64 = v.iter().map(|x| x * x).sum();
            s.sqrt()
        };

        let mut penalty = 0.0;
        // adjoint of the penalty with respect to each g[m], action dims only
        let mut adjoints: Vec<Mat> = (0..self.m).map(|_| Mat::zeros(b, od + ad)).collect();
        for i in 0..b {
            let act = |m: usize| &g[m].row(i)[od..];
            let norms: Vec<f64> = (0..self.m).map(|m| norm_of(act(m))).collect();
            for ma in 0..self.m {
                for mb in (ma + 1)..self.m {
                    let (u, v) = (act(ma), act(mb));
                    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                    let denom = norms[ma] * norms[mb] + COS_EPS;
                    let cos = dot / denom;
                    penalty += scale * cos;
                    // d cos / du_j = v_j / denom - cos * |v| * u_j / (|u| denom)
                    let cu = cos * norms[mb] / (norms[ma] * denom + COS_EPS);
                    let cv = cos * norms[ma] / (norms[mb] * denom + COS_EPS);
                    {
                        let ra = &mut adjoints[ma].row_mut(i)[od..];
                        for j in 0..ad {
                            ra[j] += scale * (v[j] / denom - cu * u[j]);
                        }
                    }
                    let rb = &mut adjoints[mb].row_mut(i)[od..];
                    for j in 0..ad {
                        rb[j] += scale * (u[j] / denom - cv * v[j]);
                    }
                }
            }
        }

        // pass 2: backpropagate sum_i <adjoint_i, g_i> into each head's params
        for (m, net) in self.online.iter().enumerate() {
            net.scalar_input_grad_backward(input, &adjoints[m], &mut grads[m])?;
        }
        Ok((penalty, grads))
    }
}
