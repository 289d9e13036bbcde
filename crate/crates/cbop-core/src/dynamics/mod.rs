//! Probabilistic dynamics ensemble: K independently initialized and
//! independently batched networks, each predicting per-dimension Gaussian
//! mean and log-variance for the normalized (next-state delta, reward).
//! Trained once on the offline dataset, then frozen; inference uses the
//! elite subset with the lowest held-out negative log-likelihood.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envdata::Dataset;
use crate::error::{CbopError, Result};
use crate::funcapprox::{AdamState, DenseNet, Gradients, Hidden, Output};
use crate::mat::Mat;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Mean,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub k_total: usize,
    pub k_elite: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// held-out fraction used for elite selection, in (0, 1)
    pub validation_fraction: f64,
    /// resample each member's training set with replacement (classic
    /// bootstrap) instead of relying on independent mini-batch streams alone
    pub bootstrap_resample: bool,
    /// stop a member early when its held-out NLL has not improved for this
    /// many epochs, restoring its best parameters; None trains the full
    /// epoch budget (predictable for fixtures)
    #[serde(default)]
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            k_total: 7,
            k_elite: 5,
            hidden: vec![64, 64],
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            validation_fraction: 0.1,
            bootstrap_resample: false,
            patience: None,
            seed: 0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_total == 0 || self.k_elite == 0 || self.k_elite > self.k_total {
            return Err(CbopError::InvalidConfig(format!(
                "need 0 < k_elite <= k_total, got {}/{}",
                self.k_elite, self.k_total
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CbopError::InvalidConfig(format!(
                "validation_fraction must lie in (0,1), got {}",
                self.validation_fraction
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(CbopError::InvalidConfig(
                "dynamics hidden sizes must be non-empty and positive".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CbopError::InvalidConfig(
                "dynamics batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CbopError::InvalidConfig(format!(
                "dynamics lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Input/output normalization. Inputs are (s, a); outputs are (Δs, r).
/// Stds are clamped to 1e-8 at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IoNorm {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 0.5;

impl IoNorm {
    /// Identity normalization (zero means, unit stds); handy when wiring a
    /// hand-built ensemble whose networks already speak raw units.
    pub fn identity(obs_dim: usize, act_dim: usize) -> IoNorm {
        IoNorm {
            in_mean: vec![0.0; obs_dim + act_dim],
            in_std: vec![1.0; obs_dim + act_dim],
            out_mean: vec![0.0; obs_dim + 1],
            out_std: vec![1.0; obs_dim + 1],
        }
    }

    fn from_dataset(ds: &Dataset) -> IoNorm {
        let st = ds.stats();
        let floor = |v: &f64| v.max(STD_FLOOR);
        let mut in_mean = st.state_mean.clone();
        in_mean.extend_from_slice(&st.action_mean);
        let mut in_std: Vec<f64> = st.state_std.iter().map(floor).collect();
        in_std.extend(st.action_std.iter().map(floor));
        let mut out_mean = st.delta_mean.clone();
        out_mean.push(st.reward_mean);
        let mut out_std: Vec<f64> = st.delta_std.iter().map(floor).collect();
        out_std.push(floor(&st.reward_std));
        IoNorm {
            in_mean,
            in_std,
            out_mean,
            out_std,
        }
    }

    pub fn normalize_in(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.in_mean[i]) / self.in_std[i];
        }
    }

    pub fn denormalize_out(&self, t: &[f64], out: &mut [f64]) {
        for i in 0..t.len() {
            out[i] = t[i] * self.out_std[i] + self.out_mean[i];
        }
    }

    pub fn normalize_out(&self, t: &[f64], out: &mut [f64]) {
        for i in 0..t.len() {
            out[i] = (t[i] - self.out_mean[i]) / self.out_std[i];
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Soft two-sided clamp of the raw log-variance output into
/// [LOGVAR_MIN, LOGVAR_MAX]; returns (value, dvalue/draw).
fn soft_clamp_logvar(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - x);
    let d_upper = sigmoid(hi - x);
    let clamped = lo + softplus(upper - lo);
    let d_clamped = sigmoid(upper - lo);
    (clamped, d_upper * d_clamped)
}

#[derive(Debug, Clone)]
pub struct DynamicsEnsemble {
    members: Vec<DenseNet>,
    elite_indices: Vec<usize>,
    pub k_total: usize,
    pub k_elite: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub norm: IoNorm,
    pub logvar_min: Vec<f64>,
    pub logvar_max: Vec<f64>,
    /// per-member held-out NLL measured after training
    pub validation_nll: Vec<f64>,
    /// per-member, per-epoch NLL on the member's training set
    pub train_nll_history: Vec<Vec<f64>>,
}

impl DynamicsEnsemble {
    /// Assemble an ensemble from pre-built networks (every member passed in
    /// is assumed trained or hand-set). Each net must map obs+act inputs to
    /// 2·(obs+1) outputs (mean and raw log-variance heads).
    pub fn from_parts(
        members: Vec<DenseNet>,
        elite_indices: Vec<usize>,
        obs_dim: usize,
        act_dim: usize,
        norm: IoNorm,
    ) -> Result<Self> {
        let k_total = members.len();
        if k_total == 0 || elite_indices.is_empty() {
            return Err(CbopError::EmptyInput("ensemble needs members and elites".into()));
        }
        if elite_indices.iter().any(|&i| i >= k_total) {
            return Err(CbopError::InvalidConfig(
                "elite index out of range".into(),
            ));
        }
        let out_width = obs_dim + 1;
        for (i, net) in members.iter().enumerate() {
            if net.in_dim() != obs_dim + act_dim || net.out_dim() != 2 * out_width {
                return Err(CbopError::shape(
                    &format!("dynamics member {i} output"),
                    2 * out_width,
                    net.out_dim(),
                ));
            }
        }
        let k_elite = elite_indices.len();
        Ok(DynamicsEnsemble {
            members,
            elite_indices,
            k_total,
            k_elite,
            obs_dim,
            act_dim,
            norm,
            logvar_min: vec![LOGVAR_MIN; out_width],
            logvar_max: vec![LOGVAR_MAX; out_width],
            validation_nll: vec![f64::NAN; k_total],
            train_nll_history: vec![Vec::new(); k_total],
        })
    }

    pub fn elite_indices(&self) -> &[usize] {
        &self.elite_indices
    }

    pub fn members(&self) -> &[DenseNet] {
        &self.members
    }

    pub fn member(&self, idx: usize) -> &DenseNet {
        &self.members[idx]
    }

    pub fn member_mut(&mut self, idx: usize) -> &mut DenseNet {
        &mut self.members[idx]
    }

    fn out_width(&self) -> usize {
        self.obs_dim + 1
    }

    /// Raw normalized prediction heads for one (s, a): mean and softly
    /// clamped log-variance, each `obs_dim + 1` wide.
    fn heads(&self, member_index: usize, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if state.len() != self.obs_dim {
            return Err(CbopError::shape("dynamics state", self.obs_dim, state.len()));
        }
        if action.len() != self.act_dim {
            return Err(CbopError::shape("dynamics action", self.act_dim, action.len()));
        }
        let mut x = vec![0.0; self.obs_dim + self.act_dim];
        x[..self.obs_dim].copy_from_slice(state);
        x[self.obs_dim..].copy_from_slice(action);
        let mut xn = vec![0.0; x.len()];
        self.norm.normalize_in(&x, &mut xn);
        let out = self.members[member_index].forward_one(&xn)?;
        let d = self.out_width();
        let mean = out[..d].to_vec();
        let logvar = out[d..]
            .iter()
            .enumerate()
            .map(|(i, &lv)| soft_clamp_logvar(lv, self.logvar_min[i], self.logvar_max[i]).0)
            .collect();
        Ok((mean, logvar))
    }

    /// One-step prediction through an elite member. `sample` draws from the
    /// Gaussian head (dimension order: state deltas, then reward).
    pub fn predict_with_rng(
        &self,
        member_index: usize,
        state: &[f64],
        action: &[f64],
        mode: PredictMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, f64)> {
        if !self.elite_indices.contains(&member_index) {
            return Err(CbopError::NotElite {
                index: member_index,
            });
        }
        let (mut t_n, logvar) = self.heads(member_index, state, action)?;
        if mode == PredictMode::Sample {
            for (v, lv) in t_n.iter_mut().zip(&logvar) {
                let eps: f64 = StandardNormal.sample(rng);
                *v += eps * (0.5 * lv).exp();
            }
        }
        let mut t = vec![0.0; t_n.len()];
        self.norm.denormalize_out(&t_n, &mut t);
        let next: Vec<f64> = state.iter().zip(&t).map(|(s, d)| s + d).collect();
        Ok((next, t[self.obs_dim]))
    }

    /// Seeded wrapper around [`Self::predict_with_rng`].
    pub fn predict(
        &self,
        member_index: usize,
        state: &[f64],
        action: &[f64],
        mode: PredictMode,
        seed: u64,
    ) -> Result<(Vec<f64>, f64)> {
        let mut r = rng::stream(seed, &[rng::tags::ROLLOUT, member_index as u64]);
        self.predict_with_rng(member_index, state, action, mode, &mut r)
    }
}

/// Gaussian NLL (per transition, summed over output dimensions, constant
/// term dropped) of a batch through one member; `targets_n` are normalized.
fn member_nll(
    net: &DenseNet,
    inputs_n: &Mat,
    targets_n: &Mat,
    logvar_min: &[f64],
    logvar_max: &[f64],
) -> Result<f64> {
    let out = net.forward(inputs_n)?;
    let d = targets_n.cols();
    let mut total = 0.0;
    for i in 0..inputs_n.rows() {
        let row = out.row(i);
        let t = targets_n.row(i);
        for j in 0..d {
            let (lv, _) = soft_clamp_logvar(row[d + j], logvar_min[j], logvar_max[j]);
            let e = t[j] - row[j];
            total += 0.5 * (e * e * (-lv).exp() + lv);
        }
    }
    Ok(total / inputs_n.rows() as f64)
}

pub fn train_dynamics(dataset: &Dataset, config: &DynamicsConfig) -> Result<DynamicsEnsemble> {
    config.validate()?;
    let n = dataset.len();
    if n < 2 {
        return Err(CbopError::InsufficientData(format!(
            "dynamics training needs at least 2 transitions, got {n}"
        )));
    }

    let obs_dim = dataset.obs_dim;
    let act_dim = dataset.act_dim;
    let in_dim = obs_dim + act_dim;
    let out_width = obs_dim + 1;
    let norm = IoNorm::from_dataset(dataset);
    let logvar_min = vec![LOGVAR_MIN; out_width];
    let logvar_max = vec![LOGVAR_MAX; out_width];

    // normalized input/target rows for the whole dataset, f64
    let mut inputs = Mat::zeros(n, in_dim);
    let mut targets = Mat::zeros(n, out_width);
    let mut raw_in = vec![0.0; in_dim];
    let mut raw_out = vec![0.0; out_width];
    for i in 0..n {
        let tr = dataset.transition(i);
        for (j, &v) in tr.s.iter().enumerate() {
            raw_in[j] = v as f64;
        }
        for (j, &v) in tr.a.iter().enumerate() {
            raw_in[obs_dim + j] = v as f64;
        }
        norm.normalize_in(&raw_in, inputs.row_mut(i));
        for j in 0..obs_dim {
            raw_out[j] = tr.s2[j] as f64 - tr.s[j] as f64;
        }
        raw_out[obs_dim] = tr.r as f64;
        norm.normalize_out(&raw_out, targets.row_mut(i));
    }

    // held-out split, shared by every member
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream(config.seed, &[rng::tags::DYNAMICS_SPLIT]);
    for i in (1..n).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, val_idx) = order.split_at(n - n_val);

    let gather = |rows: &[usize], src: &Mat| -> Mat {
        let mut out = Mat::zeros(rows.len(), src.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        out
    };
    let val_in = gather(val_idx, &inputs);
    let val_t = gather(val_idx, &targets);

    let sizes: Vec<usize> = std::iter::once(in_dim)
        .chain(config.hidden.iter().copied())
        .chain(std::iter::once(2 * out_width))
        .collect();

    let mut members = Vec::with_capacity(config.k_total);
    let mut validation_nll = Vec::with_capacity(config.k_total);
    let mut train_nll_history = Vec::with_capacity(config.k_total);
    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);

    for member in 0..config.k_total {
        let mut init_rng = rng::stream(config.seed, &[rng::tags::DYNAMICS_INIT, member as u64]);
        let mut net = DenseNet::new(&sizes, Hidden::Relu, Output::Identity, &mut init_rng);
        let mut adam = AdamState::new(&net);

        // each member draws from its own training pool and batch stream
        let member_pool: Vec<usize> = if config.bootstrap_resample {
            let mut r = rng::stream(config.seed, &[rng::tags::DYNAMICS_RESAMPLE, member as u64]);
            (0..train_idx.len())
                .map(|_| train_idx[r.random_range(0..train_idx.len())])
                .collect()
        } else {
            train_idx.to_vec()
        };
        let mut batch_rng = rng::stream(config.seed, &[rng::tags::DYNAMICS_BATCH, member as u64]);

        let member_in = gather(&member_pool, &inputs);
        let member_t = gather(&member_pool, &targets);

        let mut history = Vec::with_capacity(config.epochs);
        let mut batch_rows = vec![0usize; config.batch_size];
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut stale = 0usize;
        for epoch in 0..config.epochs {
            for step in 0..steps_per_epoch {
                for r in batch_rows.iter_mut() {
                    *r = r_pick(&mut batch_rng, member_pool.len());
                }
                let bin = gather_local(&batch_rows, &member_in);
                let bt = gather_local(&batch_rows, &member_t);

                let cache = net.forward_cached(&bin)?;
                let out = cache.output();
                let b = bin.rows() as f64;
                let mut upstream = Mat::zeros(bin.rows(), 2 * out_width);
                let mut loss = 0.0;
                for i in 0..bin.rows() {
                    let row = out.row(i);
                    let t = bt.row(i);
                    let up = upstream.row_mut(i);
                    for j in 0..out_width {
                        let (lv, dlv) =
                            soft_clamp_logvar(row[out_width + j], logvar_min[j], logvar_max[j]);
                        let e = t[j] - row[j];
                        let inv_var = (-lv).exp();
                        loss += 0.5 * (e * e * inv_var + lv);
                        up[j] = -e * inv_var / b;
                        up[out_width + j] = 0.5 * (1.0 - e * e * inv_var) * dlv / b;
                    }
                }
                loss /= b;
                if !loss.is_finite() {
                    return Err(CbopError::Divergence {
                        context: format!(
                            "dynamics member {member} epoch {epoch} step {step}: non-finite NLL"
                        ),
                    });
                }
                let mut grads = Gradients::zeros_like(&net);
                net.backward(&cache, &upstream, &mut grads)?;
                adam.apply(&mut net, &grads, config.lr)?;
            }
            history.push(member_nll(&net, &member_in, &member_t, &logvar_min, &logvar_max)?);
            if let Some(patience) = config.patience {
                let val = member_nll(&net, &val_in, &val_t, &logvar_min, &logvar_max)?;
                match &best {
                    Some((b, _)) if val >= *b => {
                        stale += 1;
                        if stale >= patience {
                            break;
                        }
                    }
                    _ => {
                        best = Some((val, net.params_flat()));
                        stale = 0;
                    }
                }
            }
        }
        if let Some((_, params)) = best {
            net.set_params_flat(&params)?;
        }

        validation_nll.push(member_nll(&net, &val_in, &val_t, &logvar_min, &logvar_max)?);
        train_nll_history.push(history);
        members.push(net);
    }

    // elites: lowest validation NLL, ties broken by member index
    let mut ranked: Vec<usize> = (0..config.k_total).collect();
    ranked.sort_by(|&a, &b| {
        validation_nll[a]
            .partial_cmp(&validation_nll[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut elite_indices: Vec<usize> = ranked[..config.k_elite].to_vec();
    elite_indices.sort_unstable();

    Ok(DynamicsEnsemble {
        members,
        elite_indices,
        k_total: config.k_total,
        k_elite: config.k_elite,
        obs_dim,
        act_dim,
        norm,
        logvar_min,
        logvar_max,
        validation_nll,
        train_nll_history,
    })
}

/// Uniform index draw; isolated so the batch streams have one documented
/// consumption pattern (one u64-range draw per row).
fn r_pick(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

fn gather_local(rows: &[usize], src: &Mat) -> Mat {
    let mut out = Mat::zeros(rows.len(), src.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(src.row(r));
    }
    out
}
