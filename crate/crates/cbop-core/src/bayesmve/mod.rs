//! Multi-horizon value targets. A grid of h-step returns is sampled by
//! rolling dataset transitions through the dynamics ensemble and
//! bootstrapping with the target critics; each horizon's sample cloud is
//! summarized as a Gaussian, and the per-horizon Gaussians are fused by
//! precision weighting into a single posterior whose lower confidence bound
//! becomes the regression target.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsEnsemble, PredictMode};
use crate::error::{CbopError, Result};
use crate::mat::Mat;
use crate::qensemble::{QEnsemble, Which};
use crate::rng;

/// Variance floor applied before inverting to precision: a degenerate
/// sample cloud would otherwise claim infinite evidence.
pub const EPS_VAR: f64 = 1e-8;

/// Anything that maps a batch of states to a batch of actions. Stochastic
/// implementations must consume the rng row by row, in row order, so that
/// rollouts are reproducible.
pub trait Policy {
    fn act_batch(&self, states: &Mat, rng: &mut ChaCha8Rng) -> Result<Mat>;
}

/// Deterministic policy from a plain function; the rng is ignored.
pub struct FnPolicy<F: Fn(&[f64]) -> Vec<f64>>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64>> Policy for FnPolicy<F> {
    fn act_batch(&self, states: &Mat, _rng: &mut ChaCha8Rng) -> Result<Mat> {
        if states.rows() == 0 {
            return Ok(Mat::zeros(0, 0));
        }
        let first = (self.0)(states.row(0));
        let mut out = Mat::zeros(states.rows(), first.len());
        out.row_mut(0).copy_from_slice(&first);
        for i in 1..states.rows() {
            let a = (self.0)(states.row(i));
            out.row_mut(i).copy_from_slice(&a);
        }
        Ok(out)
    }
}

/// One dataset transition in rollout-ready form.
#[derive(Debug, Clone, Copy)]
pub struct Sarsd<'a> {
    pub s: &'a [f64],
    pub a: &'a [f64],
    pub r: f64,
    pub s2: &'a [f64],
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// one particle per elite member rolled H steps; horizons share the
    /// trajectory (O(N·H) model calls)
    SinglePass,
    /// fresh trajectories for every horizon (O(N·H²)); kept for validating
    /// that trajectory sharing does not bias the per-horizon means
    IndependentPerH,
}

/// How returns are sampled for one transition.
pub struct RolloutSpec<'a> {
    pub horizon: usize,
    pub discount: f64,
    pub mode: SampleMode,
    /// particle propagation through the dynamics heads; `Mean` makes the
    /// whole grid deterministic for tests
    pub propagation: PredictMode,
    /// multiplies dataset and model rewards (the critics are trained in
    /// scaled units); 1.0 = off
    pub reward_scale: f64,
    /// environment termination predicate evaluated on imagined states;
    /// terminated particles absorb (zero reward, zero bootstrap)
    pub terminal: Option<&'a dyn Fn(&[f64]) -> bool>,
}

impl<'a> RolloutSpec<'a> {
    pub fn new(horizon: usize, discount: f64) -> Self {
        RolloutSpec {
            horizon,
            discount,
            mode: SampleMode::SinglePass,
            propagation: PredictMode::Sample,
            reward_scale: 1.0,
            terminal: None,
        }
    }
}

/// Return samples indexed by horizon h ∈ 0..=H, particle/member k, critic
/// head m; flattened as (h·K + k)·M + m.
#[derive(Debug, Clone)]
pub struct ReturnGrid {
    samples: Vec<f64>,
    alive: Vec<bool>,
    pub horizon: usize,
    pub k: usize,
    pub m: usize,
    pub discount: f64,
}

impl ReturnGrid {
    pub fn from_samples(
        samples: Vec<f64>,
        horizon: usize,
        k: usize,
        m: usize,
        discount: f64,
        alive: Vec<bool>,
    ) -> Result<Self> {
        let want = (horizon + 1) * k * m;
        if samples.len() != want {
            return Err(CbopError::shape("return grid samples", want, samples.len()));
        }
        if alive.len() != (horizon + 1) * k {
            return Err(CbopError::shape(
                "return grid alive mask",
                (horizon + 1) * k,
                alive.len(),
            ));
        }
        if k == 0 || m == 0 {
            return Err(CbopError::EmptyInput("return grid needs K, M >= 1".into()));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(CbopError::non_finite("return grid samples"));
        }
        Ok(ReturnGrid {
            samples,
            alive,
            horizon,
            k,
            m,
            discount,
        })
    }

    #[inline]
    pub fn sample(&self, h: usize, k: usize, m: usize) -> f64 {
        self.samples[(h * self.k + k) * self.m + m]
    }

    /// All M·K samples at one horizon, member-major.
    pub fn horizon_samples(&self, h: usize) -> &[f64] {
        let w = self.k * self.m;
        &self.samples[h * w..(h + 1) * w]
    }

    pub fn all_samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn alive(&self, h: usize, k: usize) -> bool {
        self.alive[h * self.k + k]
    }
}

/// Per-horizon Gaussian summaries of the return samples.
#[derive(Debug, Clone)]
pub struct LikelihoodParams {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub precision: Vec<f64>,
    /// mean over members of the within-member (across heads) variance
    pub var_value_part: Vec<f64>,
    /// variance across members of the per-member means
    pub var_model_part: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorEstimate {
    pub mean: f64,
    pub var: f64,
    pub weights: Vec<f64>,
    pub expected_horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Lcb,
    Map,
    Quantile,
    FixedLambda,
    FixedUniform,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetEstimatorConfig {
    pub kind: EstimatorKind,
    pub psi: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for TargetEstimatorConfig {
    fn default() -> Self {
        TargetEstimatorConfig {
            kind: EstimatorKind::Lcb,
            psi: 2.0,
            lambda: 0.95,
            alpha: 0.5,
        }
    }
}

impl TargetEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi.is_finite() && self.psi >= 0.0) {
            return Err(CbopError::InvalidConfig(format!(
                "psi must be finite and >= 0, got {}",
                self.psi
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda < 1.0) {
            return Err(CbopError::InvalidConfig(format!(
                "lambda must lie in [0,1), got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CbopError::InvalidConfig(format!(
                "alpha must lie in (0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Roll one transition through the elite dynamics members and produce the
/// full grid of h-step bootstrapped returns.
///
/// The grid is anchored at the real transition: step 0 is (s, a, r, s′)
/// itself, so R̂_h = Σ_{t≤h} γ^t r̂_t + γ^{h+1}·Q_target(ŝ_{h+1}, â_{h+1}),
/// with r̂_0 = r and ŝ_1 = s′. `done` transitions bootstrap zero and are
/// not rolled at all. Draws consume the stream in step-major,
/// particle-minor order: all actions at a level, then each live particle's
/// dynamics noise.
pub fn sample_returns(
    transition: Sarsd<'_>,
    policy: &dyn Policy,
    dynamics: &DynamicsEnsemble,
    qens: &QEnsemble,
    spec: &RolloutSpec<'_>,
    seed: u64,
) -> Result<ReturnGrid> {
    let h_max = spec.horizon;
    let kk = dynamics.elite_indices().len();
    let m = qens.m;
    if transition.s.len() != dynamics.obs_dim || transition.s2.len() != dynamics.obs_dim {
        return Err(CbopError::shape(
            "rollout state",
            dynamics.obs_dim,
            transition.s.len(),
        ));
    }
    if transition.a.len() != dynamics.act_dim {
        return Err(CbopError::shape(
            "rollout action",
            dynamics.act_dim,
            transition.a.len(),
        ));
    }
    if qens.obs_dim != dynamics.obs_dim || qens.act_dim != dynamics.act_dim {
        return Err(CbopError::shape(
            "critic dims vs dynamics dims",
            dynamics.obs_dim + dynamics.act_dim,
            qens.obs_dim + qens.act_dim,
        ));
    }
    if !(transition.r.is_finite()
        && transition.s.iter().all(|v| v.is_finite())
        && transition.a.iter().all(|v| v.is_finite())
        && transition.s2.iter().all(|v| v.is_finite()))
    {
        return Err(CbopError::non_finite("rollout transition"));
    }

    let r0 = transition.r * spec.reward_scale;
    let mut samples = vec![0.0; (h_max + 1) * kk * m];
    let mut alive = vec![false; (h_max + 1) * kk];

    if transition.done {
        samples.fill(r0);
        return ReturnGrid::from_samples(samples, h_max, kk, m, spec.discount, alive);
    }

    match spec.mode {
        SampleMode::SinglePass => {
            let mut r = rng::stream(seed, &[rng::tags::ROLLOUT]);
            roll_from(
                transition.s2,
                r0,
                0,
                h_max,
                policy,
                dynamics,
                qens,
                spec,
                &mut r,
                &mut samples,
                &mut alive,
                h_max,
                kk,
                m,
            )?;
        }
        SampleMode::IndependentPerH => {
            for h in 0..=h_max {
                let mut r = rng::stream(seed, &[rng::tags::ROLLOUT_HORIZON, h as u64]);
                roll_from(
                    transition.s2,
                    r0,
                    h,
                    h,
                    policy,
                    dynamics,
                    qens,
                    spec,
                    &mut r,
                    &mut samples,
                    &mut alive,
                    h_max,
                    kk,
                    m,
                )?;
            }
        }
    }

    ReturnGrid::from_samples(samples, h_max, kk, m, spec.discount, alive)
}

/// Roll K particles from `start` and fill grid rows h ∈ [h_lo, h_hi].
/// Shared by both sampling modes: single-pass uses the full range, the
/// per-horizon mode calls it once per horizon with h_lo = h_hi.
#[allow(clippy::too_many_arguments)]
fn roll_from(
    start: &[f64],
    r0: f64,
    h_lo: usize,
    h_hi: usize,
    policy: &dyn Policy,
    dynamics: &DynamicsEnsemble,
    qens: &QEnsemble,
    spec: &RolloutSpec<'_>,
    r: &mut ChaCha8Rng,
    samples: &mut [f64],
    alive_mask: &mut [bool],
    h_max: usize,
    kk: usize,
    m: usize,
) -> Result<()> {
    let obs = dynamics.obs_dim;
    let gamma = spec.discount;
    let elites = dynamics.elite_indices().to_vec();

    let mut states = Mat::zeros(kk, obs);
    for k in 0..kk {
        states.row_mut(k).copy_from_slice(start);
    }
    let mut live = vec![true; kk];
    if let Some(term) = spec.terminal {
        if term(start) {
            live.fill(false);
        }
    }
    let mut cum = vec![r0; kk];
    let mut disc = gamma;

    for t in 1..=(h_hi + 1) {
        let actions = policy.act_batch(&states, r)?;
        if actions.cols() != dynamics.act_dim {
            return Err(CbopError::shape(
                "policy action width",
                dynamics.act_dim,
                actions.cols(),
            ));
        }
        let h = t - 1;
        if h >= h_lo {
            // bootstrap horizon h at level t = h + 1
            let input = Mat::hcat(&states, &actions);
            let q_all = qens.q_values_all(&input, Which::Target)?;
            for k in 0..kk {
                let base = (h * kk + k) * m;
                if live[k] {
                    alive_mask[h * kk + k] = true;
                    for head in 0..m {
                        samples[base + head] = cum[k] + disc * q_all.row(k)[head];
                    }
                } else {
                    for head in 0..m {
                        samples[base + head] = cum[k];
                    }
                }
            }
        }
        if t <= h_hi.min(h_max) {
            // advance live particles one model step
            for k in 0..kk {
                if !live[k] {
                    continue;
                }
                let (next, reward) = dynamics.predict_with_rng(
                    elites[k],
                    states.row(k),
                    actions.row(k),
                    spec.propagation,
                    r,
                )?;
                cum[k] += disc * reward * spec.reward_scale;
                if let Some(term) = spec.terminal {
                    if term(&next) {
                        live[k] = false;
                    }
                }
                states.row_mut(k).copy_from_slice(&next);
            }
        }
        disc *= gamma;
    }
    Ok(())
}

/// Gaussian summary per horizon: pooled mean, and the pooled population
/// variance split into within-member (value) and across-member (model)
/// parts. The split is exact: A_h + B_h equals the pooled variance.
pub fn likelihood_params(grid: &ReturnGrid) -> LikelihoodParams {
    let hh = grid.horizon + 1;
    let (kk, mm) = (grid.k, grid.m);
    let mut mu = Vec::with_capacity(hh);
    let mut var = Vec::with_capacity(hh);
    let mut precision = Vec::with_capacity(hh);
    let mut a_part = Vec::with_capacity(hh);
    let mut b_part = Vec::with_capacity(hh);

    for h in 0..hh {
        let mut member_means = vec![0.0; kk];
        let mut within = vec![0.0; kk];
        for k in 0..kk {
            let mut s = 0.0;
            for m in 0..mm {
                s += grid.sample(h, k, m);
            }
            let mean_k = s / mm as f64;
            let mut v = 0.0;
            for m in 0..mm {
                let d = grid.sample(h, k, m) - mean_k;
                v += d * d;
            }
            member_means[k] = mean_k;
            within[k] = v / mm as f64;
        }
        let grand = member_means.iter().sum::<f64>() / kk as f64;
        let a = within.iter().sum::<f64>() / kk as f64;
        let b = member_means
            .iter()
            .map(|q| (q - grand) * (q - grand))
            .sum::<f64>()
            / kk as f64;
        let v = (a + b).max(EPS_VAR);
        mu.push(grand);
        var.push(v);
        precision.push(1.0 / v);
        a_part.push(a);
        b_part.push(b);
    }

    LikelihoodParams {
        mu,
        var,
        precision,
        var_value_part: a_part,
        var_model_part: b_part,
    }
}

/// Precision-weighted fusion of the per-horizon Gaussians under a flat
/// (improper) prior: evidence adds, so the posterior is again Gaussian.
pub fn posterior(params: &LikelihoodParams) -> PosteriorEstimate {
    let rho: f64 = params.precision.iter().sum();
    let weights: Vec<f64> = params.precision.iter().map(|p| p / rho).collect();
    let mean = weights
        .iter()
        .zip(&params.mu)
        .map(|(w, mu)| w * mu)
        .sum::<f64>();
    let expected_horizon = weights
        .iter()
        .enumerate()
        .map(|(h, w)| w * h as f64)
        .sum::<f64>();
    PosteriorEstimate {
        mean,
        var: 1.0 / rho,
        weights,
        expected_horizon,
    }
}

/// A/(A+B) per horizon: the share of sample spread attributable to critic
/// disagreement rather than model disagreement. Degenerate horizons (both
/// parts zero) report 0.
pub fn variance_ratio(params: &LikelihoodParams) -> Vec<f64> {
    params
        .var_value_part
        .iter()
        .zip(&params.var_model_part)
        .map(|(&a, &b)| if a + b > 0.0 { a / (a + b) } else { 0.0 })
        .collect()
}

/// Reduce a return grid and its posterior to one scalar regression target.
pub fn target_estimate(
    grid: &ReturnGrid,
    post: &PosteriorEstimate,
    config: &TargetEstimatorConfig,
) -> Result<f64> {
    config.validate()?;
    match config.kind {
        EstimatorKind::Lcb => Ok(post.mean - config.psi * post.var.sqrt()),
        EstimatorKind::Map => Ok(post.mean),
        EstimatorKind::Quantile => {
            let pooled = grid.all_samples();
            if pooled.is_empty() {
                return Err(CbopError::EmptyInput("quantile over empty grid".into()));
            }
            let mut sorted = pooled.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let idx = ((config.alpha * n as f64).floor() as usize).clamp(1, n);
            Ok(sorted[idx - 1])
        }
        EstimatorKind::FixedLambda => {
            let w = lambda_weights(config.lambda, grid.horizon);
            Ok(lcb_over_weighted_sums(grid, &w, config.psi))
        }
        EstimatorKind::FixedUniform => {
            let w = vec![1.0 / (grid.horizon + 1) as f64; grid.horizon + 1];
            Ok(lcb_over_weighted_sums(grid, &w, config.psi))
        }
    }
}

/// Geometric horizon weights w_h ∝ λ^h, normalized over h = 0..=H.
pub fn lambda_weights(lambda: f64, horizon: usize) -> Vec<f64> {
    let hh = horizon + 1;
    if lambda == 0.0 {
        let mut w = vec![0.0; hh];
        w[0] = 1.0;
        return w;
    }
    let norm = (1.0 - lambda) / (1.0 - lambda.powi(hh as i32));
    (0..hh).map(|h| norm * lambda.powi(h as i32)).collect()
}

/// Collapse each (k, m) sample path to Σ_h w_h·R̂_h, then take
/// mean − ψ·(population std) over the M·K sums.
fn lcb_over_weighted_sums(grid: &ReturnGrid, w: &[f64], psi: f64) -> f64 {
    let n = grid.k * grid.m;
    let mut sums = vec![0.0; n];
    for h in 0..=grid.horizon {
        let hs = grid.horizon_samples(h);
        for (s, x) in sums.iter_mut().zip(hs) {
            *s += w[h] * x;
        }
    }
    let mean = sums.iter().sum::<f64>() / n as f64;
    let var = sums.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
    mean - psi * var.sqrt()
}

/// Slow reference implementations kept for cross-checking the closed
/// forms; used by the test suites, not by training.
pub mod reference {
    use super::LikelihoodParams;

    /// Posterior mean/variance by brute force: evaluate the normalized
    /// product of the per-horizon Gaussian densities on a fine grid and
    /// integrate. Entirely independent of the precision-weighting formula.
    pub fn grid_product_posterior(params: &LikelihoodParams) -> (f64, f64) {
        let mus = &params.mu;
        let sigmas: Vec<f64> = params.var.iter().map(|v| v.sqrt()).collect();
        let lo = mus
            .iter()
            .zip(&sigmas)
            .map(|(m, s)| m - 12.0 * s)
            .fold(f64::INFINITY, f64::min);
        let hi = mus
            .iter()
            .zip(&sigmas)
            .map(|(m, s)| m + 12.0 * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let narrowest = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
        let dx = narrowest / 40.0;
        let n = (((hi - lo) / dx).ceil() as usize + 1).min(4_000_000);

        // log-space product, shifted by its max before exponentiating
        let xs: Vec<f64> = (0..n).map(|i| lo + dx * i as f64).collect();
        let mut logp: Vec<f64> = xs
            .iter()
            .map(|&x| {
                mus.iter()
                    .zip(&params.var)
                    .map(|(&m, &v)| -(x - m) * (x - m) / (2.0 * v))
                    .sum::<f64>()
            })
            .collect();
        let peak = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for lp in logp.iter_mut() {
            *lp = (*lp - peak).exp();
        }
        let mass: f64 = logp.iter().sum();
        let mean: f64 = xs.iter().zip(&logp).map(|(x, p)| x * p).sum::<f64>() / mass;
        let var: f64 = xs
            .iter()
            .zip(&logp)
            .map(|(x, p)| (x - mean) * (x - mean) * p)
            .sum::<f64>()
            / mass;
        (mean, var)
    }

    /// Pooled population variance of a flat slice.
    pub fn pooled_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DynamicsConfig, IoNorm};
    use crate::funcapprox::{DenseNet, Hidden, Output};
    use rand::Rng;

    /// Hand-assembled deterministic dynamics: one linear member computing
    /// Δs = -0.1 s + 0.1 a, r = 1.0 s - 0.5 a, identity normalization.
    fn linear_dynamics() -> DynamicsEnsemble {
        let mut r = rng::stream(0, &[0]);
        let mut net = DenseNet::new(&[2, 4], Hidden::Relu, Output::Identity, &mut r);
        // columns: Δs mean, r mean, Δs logvar(raw), r logvar(raw)
        net.set_params_flat(&[
            -0.1, 1.0, 0.0, 0.0, // weights from s
            0.1, -0.5, 0.0, 0.0, // weights from a
            0.0, 0.0, -30.0, -30.0, // bias (log-variances pinned far below the clamp)
        ])
        .unwrap();
        DynamicsEnsemble::from_parts(vec![net], vec![0], 1, 1, IoNorm::identity(1, 1)).unwrap()
    }

    /// Single linear critic head Q(s, a) = 2 s + a (targets synced).
    fn linear_critic() -> QEnsemble {
        let mut q = QEnsemble::new(1, 1, 1, &[], Hidden::Relu, 0).unwrap();
        q.head_mut(0).set_params_flat(&[2.0, 1.0, 0.0]).unwrap();
        q.hard_sync();
        q
    }

    fn half_state_policy() -> FnPolicy<impl Fn(&[f64]) -> Vec<f64>> {
        FnPolicy(|s: &[f64]| vec![0.5 * s[0]])
    }

    fn det_spec(h: usize, gamma: f64) -> RolloutSpec<'static> {
        let mut spec = RolloutSpec::new(h, gamma);
        spec.propagation = PredictMode::Mean;
        spec
    }

    #[test]
    fn h0_grid_is_the_td_target() {
        let dynamics = linear_dynamics();
        let qens = linear_critic();
        let policy = half_state_policy();
        let tr = Sarsd {
            s: &[0.4],
            a: &[-0.3],
            r: 1.5,
            s2: &[0.33],
            done: false,
        };
        let gamma = 0.9;
        let grid =
            sample_returns(tr, &policy, &dynamics, &qens, &det_spec(0, gamma), 7).unwrap();
        let pi_s2 = 0.5 * 0.33;
        let expected = 1.5 + gamma * (2.0 * 0.33 + pi_s2);
        assert!((grid.sample(0, 0, 0) - expected).abs() < 1e-12);
        assert!(grid.alive(0, 0));
    }

    #[test]
    fn zero_discount_collapses_to_the_reward() {
        let dynamics = linear_dynamics();
        let qens = linear_critic();
        let policy = half_state_policy();
        let tr = Sarsd {
            s: &[0.4],
            a: &[-0.3],
            r: 1.5,
            s2: &[0.33],
            done: false,
        };
        let grid =
            sample_returns(tr, &policy, &dynamics, &qens, &det_spec(3, 0.0), 7).unwrap();
        for h in 0..=3 {
            assert_eq!(grid.sample(h, 0, 0), 1.5);
        }
    }

    #[test]
    fn done_transitions_bootstrap_zero_and_do_not_roll() {
        let dynamics = linear_dynamics();
        let qens = linear_critic();
        let policy = half_state_policy();
        let tr = Sarsd {
            s: &[0.4],
            a: &[-0.3],
            r: -2.0,
            s2: &[0.33],
            done: true,
        };
        let grid =
            sample_returns(tr, &policy, &dynamics, &qens, &det_spec(4, 0.9), 7).unwrap();
        for h in 0..=4 {
            assert_eq!(grid.sample(h, 0, 0), -2.0);
            assert!(!grid.alive(h, 0));
        }
    }

    /// Full hand computation of a two-step deterministic rollout.
    #[test]
    fn two_step_rollout_matches_hand_computation() {
        let dynamics = linear_dynamics();
        let qens = linear_critic();
        let policy = half_state_policy();
        let (s2, r0, gamma) = (0.8, 0.25, 0.9);
        let tr = Sarsd {
            s: &[0.1],
            a: &[0.2],
            r: r0,
            s2: &[s2],
            done: false,
        };
        let grid =
            sample_returns(tr, &policy, &dynamics, &qens, &det_spec(2, gamma), 7).unwrap();

        // plain scalar re-derivation
        let step = |s: f64, a: f64| (s + (-0.1 * s + 0.1 * a), 1.0 * s - 0.5 * a);
        let q = |s: f64, a: f64| 2.0 * s + a;
        let pi = |s: f64| 0.5 * s;

        let a1 = pi(s2);
        let (sh2, r1) = step(s2, a1);
        let a2 = pi(sh2);
        let (sh3, r2) = step(sh2, a2);
        let a3 = pi(sh3);

        let want0 = r0 + gamma * q(s2, a1);
        let want1 = r0 + gamma * r1 + gamma * gamma * q(sh2, a2);
        let want2 = r0 + gamma * r1 + gamma * gamma * r2 + gamma.powi(3) * q(sh3, a3);
        assert!((grid.sample(0, 0, 0) - want0).abs() < 1e-12);
        assert!((grid.sample(1, 0, 0) - want1).abs() < 1e-12);
        assert!((grid.sample(2, 0, 0) - want2).abs() < 1e-12);
    }

    #[test]
    fn terminated_particles_absorb() {
        let dynamics = linear_dynamics();
        let qens = linear_critic();
        let policy = half_state_policy();
        let (s2, r0, gamma) = (0.8, 0.25, 0.9);
        let tr = Sarsd {
            s: &[0.1],
            a: &[0.2],
            r: r0,
            s2: &[s2],
            done: false,
        };
        // terminal once the state drops below 0.75: the first model step
        // (0.8 -> 0.76) survives, the second (0.76 -> 0.722) terminates
        let term = |s: &[f64]| s[0] < 0.75;
        let mut spec = det_spec(3, gamma);
        spec.terminal = Some(&term);
        let grid = sample_returns(tr, &policy, &dynamics, &qens, &spec, 7).unwrap();

        let step = |s: f64, a: f64| (s + (-0.1 * s + 0.1 * a), 1.0 * s - 0.5 * a);
        let q = |s: f64, a: f64| 2.0 * s + a;
        let pi = |s: f64| 0.5 * s;
        let a1 = pi(s2);
        let (sh2, r1) = step(s2, a1);
        let a2 = pi(sh2);
        let (_sh3, r2) = step(sh2, a2);

        assert!(grid.alive(0, 0));
        assert!(grid.alive(1, 0));
        assert!(!grid.alive(2, 0));
        assert!(!grid.alive(3, 0));
        // horizons 2 and 3 share the truncated reward sum with no bootstrap
        let truncated = r0 + gamma * r1 + gamma * gamma * r2;
        assert!((grid.sample(0, 0, 0) - (r0 + gamma * q(s2, a1))).abs() < 1e-12);
        assert!((grid.sample(2, 0, 0) - truncated).abs() < 1e-12);
        assert!((grid.sample(3, 0, 0) - truncated).abs() < 1e-12);
    }

    #[test]
    fn reward_scale_multiplies_all_reward_terms() {
        let dynamics = linear_dynamics();
        let mut qens = QEnsemble::new(1, 1, 1, &[], Hidden::Relu, 0).unwrap();
        // zero critic so only reward terms remain
        qens.head_mut(0).set_params_flat(&[0.0, 0.0, 0.0]).unwrap();
        qens.hard_sync();
        let policy = half_state_policy();
        let tr = Sarsd {
            s: &[0.1],
            a: &[0.2],
            r: 0.25,
            s2: &[0.8],
            done: false,
        };
        let mut spec_scaled = det_spec(2, 0.9);
        spec_scaled.reward_scale = 0.125;
        let plain = sample_returns(tr, &policy, &dynamics, &qens, &det_spec(2, 0.9), 7).unwrap();
        let scaled = sample_returns(tr, &policy, &dynamics, &qens, &spec_scaled, 7).unwrap();
        for h in 0..=2 {
            assert!((scaled.sample(h, 0, 0) - 0.125 * plain.sample(h, 0, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_worked_example() {
        // member 0 samples {1,3}, member 1 samples {5,7}
        let grid = ReturnGrid::from_samples(
            vec![1.0, 3.0, 5.0, 7.0],
            0,
            2,
            2,
            0.99,
            vec![true, true],
        )
        .unwrap();
        let p = likelihood_params(&grid);
        assert!((p.mu[0] - 4.0).abs() < 1e-12);
        assert!((p.var_value_part[0] - 1.0).abs() < 1e-12);
        assert!((p.var_model_part[0] - 4.0).abs() < 1e-12);
        assert!((p.var[0] - 5.0).abs() < 1e-12);
        assert!((p.var[0] - reference::pooled_variance(grid.all_samples())).abs() < 1e-12);
        let ratios = variance_ratio(&p);
        assert!((ratios[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cloud_clamps_to_eps() {
        let grid =
            ReturnGrid::from_samples(vec![3.0; 6], 0, 3, 2, 0.99, vec![true; 3]).unwrap();
        let p = likelihood_params(&grid);
        assert_eq!(p.mu[0], 3.0);
        assert_eq!(p.var[0], EPS_VAR);
        assert_eq!(p.precision[0], 1.0 / EPS_VAR);
    }

    #[test]
    fn single_member_has_no_model_variance() {
        let grid = ReturnGrid::from_samples(
            vec![1.0, 2.0, 6.0],
            0,
            1,
            3,
            0.99,
            vec![true],
        )
        .unwrap();
        let p = likelihood_params(&grid);
        assert_eq!(p.var_model_part[0], 0.0);
        let expected_a = reference::pooled_variance(&[1.0, 2.0, 6.0]);
        assert!((p.var_value_part[0] - expected_a).abs() < 1e-12);
        assert!((variance_ratio(&p)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_head_has_no_value_variance() {
        let grid = ReturnGrid::from_samples(
            vec![1.0, 2.0, 6.0],
            0,
            3,
            1,
            0.99,
            vec![true; 3],
        )
        .unwrap();
        let p = likelihood_params(&grid);
        assert_eq!(p.var_value_part[0], 0.0);
        assert_eq!(variance_ratio(&p)[0], 0.0);
    }

    #[test]
    fn posterior_single_horizon_is_the_likelihood() {
        let p = LikelihoodParams {
            mu: vec![5.0],
            var: vec![4.0],
            precision: vec![0.25],
            var_value_part: vec![4.0],
            var_model_part: vec![0.0],
        };
        let post = posterior(&p);
        assert_eq!(post.mean, 5.0);
        assert_eq!(post.var, 4.0);
        assert_eq!(post.weights, vec![1.0]);
        assert_eq!(post.expected_horizon, 0.0);
    }

    #[test]
    fn posterior_worked_example() {
        let var = [1.0, 4.0, 0.25];
        let p = LikelihoodParams {
            mu: vec![1.0, 2.0, 3.0],
            var: var.to_vec(),
            precision: var.iter().map(|v| 1.0 / v).collect(),
            var_value_part: var.to_vec(),
            var_model_part: vec![0.0; 3],
        };
        let post = posterior(&p);
        assert!((post.weights[0] - 4.0 / 21.0).abs() < 1e-12);
        assert!((post.weights[1] - 1.0 / 21.0).abs() < 1e-12);
        assert!((post.weights[2] - 16.0 / 21.0).abs() < 1e-12);
        assert!((post.mean - 54.0 / 21.0).abs() < 1e-12);
        assert!((post.var - 1.0 / 5.25).abs() < 1e-12);

        // quadrature cross-check
        let (m_ref, v_ref) = reference::grid_product_posterior(&p);
        assert!((post.mean - m_ref).abs() < 1e-7, "mean {} vs {}", post.mean, m_ref);
        assert!((post.var - v_ref).abs() < 1e-7, "var {} vs {}", post.var, v_ref);

        // LCB at psi = 2 from the same posterior
        let grid =
            ReturnGrid::from_samples(vec![0.0], 0, 1, 1, 0.99, vec![true]).unwrap();
        let cfg = TargetEstimatorConfig {
            kind: EstimatorKind::Lcb,
            psi: 2.0,
            ..Default::default()
        };
        let y = target_estimate(&grid, &post, &cfg).unwrap();
        assert!((y - 1.6985).abs() < 1e-4);

        let map = target_estimate(
            &grid,
            &post,
            &TargetEstimatorConfig {
                kind: EstimatorKind::Map,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(map, post.mean);
    }

    #[test]
    fn quantile_order_statistic_rule() {
        let grid = ReturnGrid::from_samples(
            vec![3.0, 1.0, 4.0, 2.0],
            0,
            2,
            2,
            0.99,
            vec![true; 2],
        )
        .unwrap();
        let post = posterior(&likelihood_params(&grid));
        let mut cfg = TargetEstimatorConfig {
            kind: EstimatorKind::Quantile,
            alpha: 0.5,
            ..Default::default()
        };
        assert_eq!(target_estimate(&grid, &post, &cfg).unwrap(), 2.0);
        // alpha small enough that floor(alpha n) = 0 clamps to the minimum
        cfg.alpha = 0.1;
        assert_eq!(target_estimate(&grid, &post, &cfg).unwrap(), 1.0);
        cfg.alpha = 1.0;
        assert_eq!(target_estimate(&grid, &post, &cfg).unwrap(), 4.0);
    }

    #[test]
    fn lambda_weights_normalize_and_decay() {
        for lambda in [0.0, 0.3, 0.5, 0.9, 0.95] {
            let w = lambda_weights(lambda, 7);
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "lambda {lambda}: sum {total}");
            if lambda > 0.0 {
                for h in 0..7 {
                    assert!((w[h] / w[h + 1] - 1.0 / lambda).abs() < 1e-9);
                }
            }
        }
        let w0 = lambda_weights(0.0, 5);
        assert_eq!(w0[0], 1.0);
        assert!(w0[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lambda_zero_estimator_uses_only_the_first_horizon() {
        // two horizons with wildly different h=1 samples; λ=0 must ignore them
        let mk = 4;
        let mut samples = vec![1.0, 2.0, 3.0, 4.0];
        samples.extend_from_slice(&[100.0, -50.0, 7.0, 0.5]);
        let grid = ReturnGrid::from_samples(samples, 1, 2, 2, 0.99, vec![true; 4]).unwrap();
        let post = posterior(&likelihood_params(&grid));
        let cfg = TargetEstimatorConfig {
            kind: EstimatorKind::FixedLambda,
            lambda: 0.0,
            psi: 1.0,
            ..Default::default()
        };
        let y = target_estimate(&grid, &post, &cfg).unwrap();
        let h0 = &grid.all_samples()[..mk];
        let mean = h0.iter().sum::<f64>() / mk as f64;
        let sd = reference::pooled_variance(h0).sqrt();
        assert!((y - (mean - sd)).abs() < 1e-12);
    }

    #[test]
    fn uniform_estimator_averages_horizons() {
        let grid = ReturnGrid::from_samples(
            vec![2.0, 2.0, 6.0, 6.0],
            1,
            1,
            2,
            0.99,
            vec![true; 2],
        )
        .unwrap();
        let post = posterior(&likelihood_params(&grid));
        let cfg = TargetEstimatorConfig {
            kind: EstimatorKind::FixedUniform,
            psi: 0.0,
            ..Default::default()
        };
        // per-sample weighted sums: (2+6)/2 = 4 for both heads
        assert_eq!(target_estimate(&grid, &post, &cfg).unwrap(), 4.0);
    }

    #[test]
    fn psi_zero_lcb_equals_map() {
        let grid = ReturnGrid::from_samples(
            vec![1.0, 2.0, 5.0, 8.0],
            1,
            1,
            2,
            0.99,
            vec![true; 2],
        )
        .unwrap();
        let post = posterior(&likelihood_params(&grid));
        let lcb0 = target_estimate(
            &grid,
            &post,
            &TargetEstimatorConfig {
                kind: EstimatorKind::Lcb,
                psi: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(lcb0, post.mean);
    }

    #[test]
    fn random_grids_satisfy_total_variance_and_simplex() {
        let mut r = rng::stream(31, &[1]);
        for _ in 0..50 {
            let h = r.random_range(0..6usize);
            let k = r.random_range(1..5usize);
            let m = r.random_range(1..5usize);
            let n = (h + 1) * k * m;
            let samples: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
            let grid =
                ReturnGrid::from_samples(samples, h, k, m, 0.99, vec![true; (h + 1) * k])
                    .unwrap();
            let p = likelihood_params(&grid);
            for hh in 0..=h {
                let pooled = reference::pooled_variance(grid.horizon_samples(hh));
                let split = p.var_value_part[hh] + p.var_model_part[hh];
                assert!(
                    (pooled - split).abs() < 1e-9,
                    "total variance violated: {pooled} vs {split}"
                );
            }
            let post = posterior(&p);
            let total: f64 = post.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(post.weights.iter().all(|&w| w > 0.0));
            assert!(post.expected_horizon >= 0.0 && post.expected_horizon <= h as f64);
            // fusion never loses precision
            let min_var = p.var.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(post.var <= min_var + 1e-15);
            // strictly decreasing in psi while sigma > 0
            let y1 = post.mean - 1.0 * post.var.sqrt();
            let y2 = post.mean - 2.0 * post.var.sqrt();
            assert!(y2 < y1);
        }
    }

    #[test]
    fn equal_variances_average_the_means() {
        let p = LikelihoodParams {
            mu: vec![2.0, 4.0],
            var: vec![1.0, 1.0],
            precision: vec![1.0, 1.0],
            var_value_part: vec![1.0, 1.0],
            var_model_part: vec![0.0, 0.0],
        };
        let post = posterior(&p);
        assert_eq!(post.mean, 3.0);
        assert_eq!(post.var, 0.5);
        assert_eq!(post.weights, vec![0.5, 0.5]);
        assert_eq!(post.expected_horizon, 0.5);
    }

    /// Trajectory sharing (single pass) and per-horizon resampling must
    /// agree in expectation; smoke-scale version of the full comparison.
    #[test]
    fn modes_agree_in_expectation_smoke() {
        let ds = {
            use crate::envdata::{BehaviorTag, Dataset};
            let mut r = rng::stream(5, &[9]);
            let n = 800;
            let mut s = Vec::new();
            let mut a = Vec::new();
            let mut rew = Vec::new();
            let mut s2 = Vec::new();
            for _ in 0..n {
                let x: f64 = r.random_range(-1.0..1.0);
                let u: f64 = r.random_range(-1.0..1.0);
                s.push(x as f32);
                a.push(u as f32);
                rew.push((-x * x) as f32);
                s2.push((0.9 * x + 0.1 * u) as f32);
            }
            Dataset::from_columns(
                "linear".into(),
                1,
                1,
                BehaviorTag::Random,
                5,
                s,
                a,
                rew,
                s2,
                vec![false; n],
                (0..n).map(|i| i == 0).collect(),
            )
            .unwrap()
        };
        let cfg = DynamicsConfig {
            k_total: 3,
            k_elite: 3,
            hidden: vec![24, 24],
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            validation_fraction: 0.1,
            bootstrap_resample: false,
            patience: None,
            seed: 2,
        };
        let dynamics = crate::dynamics::train_dynamics(&ds, &cfg).unwrap();
        let qens = QEnsemble::new(3, 1, 1, &[16], Hidden::Tanh, 4).unwrap();
        let policy = half_state_policy();
        let tr = Sarsd {
            s: &[0.4],
            a: &[-0.1],
            r: -0.16,
            s2: &[0.35],
            done: false,
        };
        let h = 3;
        let spec_sp = RolloutSpec::new(h, 0.95);
        let mut spec_ind = RolloutSpec::new(h, 0.95);
        spec_ind.mode = SampleMode::IndependentPerH;

        let seeds = 64;
        let mut mu_sp = vec![0.0; h + 1];
        let mut mu_ind = vec![0.0; h + 1];
        let mut m2_sp = vec![0.0; h + 1];
        let mut m2_ind = vec![0.0; h + 1];
        for seed in 0..seeds {
            let g1 = sample_returns(tr, &policy, &dynamics, &qens, &spec_sp, seed).unwrap();
            let g2 = sample_returns(tr, &policy, &dynamics, &qens, &spec_ind, seed + 10_000)
                .unwrap();
            let p1 = likelihood_params(&g1);
            let p2 = likelihood_params(&g2);
            for hh in 0..=h {
                mu_sp[hh] += p1.mu[hh];
                mu_ind[hh] += p2.mu[hh];
                m2_sp[hh] += p1.mu[hh] * p1.mu[hh];
                m2_ind[hh] += p2.mu[hh] * p2.mu[hh];
            }
        }
        let n = seeds as f64;
        for hh in 0..=h {
            let (a, b) = (mu_sp[hh] / n, mu_ind[hh] / n);
            let va = m2_sp[hh] / n - a * a;
            let vb = m2_ind[hh] / n - b * b;
            let se = ((va + vb) / n).sqrt().max(1e-12);
            assert!(
                (a - b).abs() < 4.0 * se,
                "horizon {hh}: {a} vs {b} (se {se})"
            );
        }
    }

    #[test]
    fn equal_seeds_reproduce_sampled_grids() {
        let dynamics = linear_dynamics();
        let qens = linear_critic();
        let policy = half_state_policy();
        let tr = Sarsd {
            s: &[0.1],
            a: &[0.2],
            r: 0.25,
            s2: &[0.8],
            done: false,
        };
        let spec = RolloutSpec::new(3, 0.9); // stochastic propagation
        let g1 = sample_returns(tr, &policy, &dynamics, &qens, &spec, 42).unwrap();
        let g2 = sample_returns(tr, &policy, &dynamics, &qens, &spec, 42).unwrap();
        let g3 = sample_returns(tr, &policy, &dynamics, &qens, &spec, 43).unwrap();
        assert_eq!(g1.all_samples(), g2.all_samples());
        assert_ne!(g1.all_samples(), g3.all_samples());
    }
}
