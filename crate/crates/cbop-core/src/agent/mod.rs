//! Actor-critic training on top of the frozen dynamics ensemble: behavior
//! cloning and fitted Q evaluation for warm starts, then the main loop —
//! sample return grids, fuse the per-horizon posterior, regress the critic
//! ensemble to conservative targets, improve the policy against the critic.

mod checkpoint;
mod eval;
mod policy;
mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{conservatism_gap, evaluate_policy, EvalResult, GapResult, GapRow};
pub use policy::{logstd_map, logstd_map_deriv, PolicyNet, LOG_STD_MAX, LOG_STD_MIN, SQUASH_EPS};
pub use pretrain::{
    bc_pretrain, fqe_pretrain, fqe_rank_hyperparams, spearman_from_ranks, BcConfig, BcReport,
    FqeConfig, FqeTargets, RankEntry, FQE_DIVERGENCE_LIMIT,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bayesmve::{
    likelihood_params, posterior, sample_returns, target_estimate, RolloutSpec, SampleMode, Sarsd,
    TargetEstimatorConfig,
};
use crate::dynamics::{DynamicsEnsemble, PredictMode};
use crate::envdata::{Dataset, EnvSpec};
use crate::error::{CbopError, Result};
use crate::funcapprox::{AdamState, Gradients, Hidden};
use crate::mat::Mat;
use crate::qensemble::{QEnsemble, Which};
use crate::rng;

/// Losses above this are treated as divergence and abort the epoch.
pub const TRAIN_DIVERGENCE_LIMIT: f64 = 1e8;

/// When rewards are rescaled automatically, the RMS reward is floored here
/// so tiny-reward datasets do not explode the scale.
pub const REWARD_RMS_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyObjective {
    /// ascend the mean over online Q heads (default)
    MeanQ,
    /// ascend the per-sample minimum over online Q heads
    MinQ,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// rollout horizon H; targets fuse horizons 0..=H
    pub horizon: usize,
    pub gamma: f64,
    /// number of Q heads
    pub m: usize,
    pub q_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Polyak rate for the critic target nets, applied once per step
    pub target_update_rate: f64,
    pub entropy_temperature: f64,
    /// weight of the critic diversity penalty
    pub eta: f64,
    pub seed: u64,
    pub estimator: TargetEstimatorConfig,
    pub rollout_mode: SampleMode,
    pub propagation: PredictMode,
    pub policy_objective: PolicyObjective,
    pub eval_episodes: usize,
    /// rescale rewards to (1−γ)/rms(reward) so critic outputs are O(1)
    pub auto_reward_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small-ensemble configuration sized for single-core smoke runs.
    pub fn desk() -> Self {
        TrainConfig {
            horizon: 10,
            gamma: 0.99,
            m: 10,
            q_hidden: vec![32, 32],
            policy_hidden: vec![32, 32],
            batch_size: 32,
            epochs: 150,
            steps_per_epoch: 25,
            lr_actor: 3e-4,
            lr_critic: 1e-3,
            target_update_rate: 0.01,
            entropy_temperature: 0.05,
            eta: 1.0,
            seed: 0,
            estimator: TargetEstimatorConfig::default(),
            rollout_mode: SampleMode::SinglePass,
            propagation: PredictMode::Sample,
            policy_objective: PolicyObjective::MeanQ,
            eval_episodes: 10,
            auto_reward_scale: true,
        }
    }

    /// Full-size configuration; far too slow for tests, kept as the
    /// reference operating point.
    pub fn paper() -> Self {
        TrainConfig {
            m: 20,
            q_hidden: vec![256, 256],
            policy_hidden: vec![256, 256],
            batch_size: 256,
            epochs: 1000,
            steps_per_epoch: 1000,
            target_update_rate: 5e-3,
            ..TrainConfig::desk()
        }
    }

    /// LCB coefficient of the current estimator.
    pub fn psi(&self) -> f64 {
        self.estimator.psi
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(CbopError::InvalidConfig(format!(
                "gamma must lie in [0,1), got {}",
                self.gamma
            )));
        }
        if self.m < 2 {
            return Err(CbopError::InvalidConfig(format!(
                "training needs at least 2 Q heads for the variance split, got {}",
                self.m
            )));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(CbopError::InvalidConfig(
                "batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        for (name, v) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("entropy_temperature", self.entropy_temperature),
            ("eta", self.eta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CbopError::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return Err(CbopError::InvalidConfig(format!(
                "target_update_rate must lie in (0,1], got {}",
                self.target_update_rate
            )));
        }
        if self.eval_episodes == 0 {
            return Err(CbopError::InvalidConfig(
                "eval_episodes must be positive".into(),
            ));
        }
        self.estimator.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// mean regression target over the epoch, in raw reward units
    pub mean_target: f64,
    pub mean_expected_horizon: f64,
    pub eval_return: f64,
    pub normalized_score: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,actor_loss,critic_loss,mean_target,mean_expected_horizon,eval_return,normalized_score";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.actor_loss,
            self.critic_loss,
            self.mean_target,
            self.mean_expected_horizon,
            self.eval_return,
            self.normalized_score
        )
    }
}

/// Everything the training loop owns. The dynamics ensemble is frozen at
/// construction and only readable afterwards.
#[derive(Debug)]
pub struct AgentState {
    pub policy: PolicyNet,
    pub critic: QEnsemble,
    dynamics: DynamicsEnsemble,
    pub env: EnvSpec,
    policy_opt: AdamState,
    critic_opts: Vec<AdamState>,
    epoch: usize,
    pub reward_scale: f64,
    metrics: Vec<EpochMetrics>,
}

impl AgentState {
    pub fn new(
        env: &EnvSpec,
        dataset: &Dataset,
        dynamics: DynamicsEnsemble,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.env_id != env.id {
            return Err(CbopError::InvalidConfig(format!(
                "dataset was generated on '{}' but the agent targets '{}'",
                dataset.env_id, env.id
            )));
        }
        if dataset.obs_dim != env.obs_dim || dataset.act_dim != env.act_dim {
            return Err(CbopError::shape(
                "agent dataset dims",
                env.obs_dim + env.act_dim,
                dataset.obs_dim + dataset.act_dim,
            ));
        }
        if dynamics.obs_dim != env.obs_dim || dynamics.act_dim != env.act_dim {
            return Err(CbopError::shape(
                "agent dynamics dims",
                env.obs_dim + env.act_dim,
                dynamics.obs_dim + dynamics.act_dim,
            ));
        }

        let reward_scale = if config.auto_reward_scale {
            let stats = dataset.stats();
            let rms = (stats.reward_mean * stats.reward_mean
                + stats.reward_std * stats.reward_std)
                .sqrt();
            (1.0 - config.gamma) / rms.max(REWARD_RMS_FLOOR)
        } else {
            1.0
        };

        let policy = PolicyNet::new(
            env.obs_dim,
            env.act_dim,
            &config.policy_hidden,
            &env.action_low,
            &env.action_high,
            config.entropy_temperature,
            config.seed,
        )?;
        let critic = QEnsemble::new(
            config.m,
            env.obs_dim,
            env.act_dim,
            &config.q_hidden,
            Hidden::Relu,
            config.seed,
        )?;
        let policy_opt = AdamState::new(policy.net());
        let critic_opts = critic.heads().iter().map(AdamState::new).collect();
        Ok(AgentState {
            policy,
            critic,
            dynamics,
            env: env.clone(),
            policy_opt,
            critic_opts,
            epoch: 0,
            reward_scale,
            metrics: Vec::new(),
        })
    }

    pub fn dynamics(&self) -> &DynamicsEnsemble {
        &self.dynamics
    }

    /// Completed training epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }
}

/// One MSE + diversity-penalty update of every online head against a frozen
/// target vector. Returns the pre-update loss (mean over heads + η·penalty).
fn critic_step(
    critic: &mut QEnsemble,
    opts: &mut [AdamState],
    input: &Mat,
    y: &[f64],
    eta: f64,
    lr: f64,
) -> Result<f64> {
    let b = input.rows();
    let (penalty, penalty_grads) = if eta > 0.0 {
        let (p, g) = critic.diversity_penalty(input)?;
        (p, Some(g))
    } else {
        (0.0, None)
    };

    let mut total_mse = 0.0;
    for m in 0..critic.m {
        let cache = critic.heads()[m].forward_cached(input)?;
        let out = cache.output();
        let mut upstream = Mat::zeros(b, 1);
        let mut mse = 0.0;
        for i in 0..b {
            let e = out.row(i)[0] - y[i];
            mse += e * e;
            upstream.row_mut(i)[0] = 2.0 * e / b as f64;
        }
        mse /= b as f64;
        total_mse += mse;
        let mut grads = Gradients::zeros_like(&critic.heads()[m]);
        critic.heads()[m].backward(&cache, &upstream, &mut grads)?;
        if let Some(pg) = &penalty_grads {
            for l in 0..grads.weights.len() {
                for (g, p) in grads.weights[l].iter_mut().zip(&pg[m].weights[l]) {
                    *g += eta * p;
                }
                for (g, p) in grads.biases[l].iter_mut().zip(&pg[m].biases[l]) {
                    *g += eta * p;
                }
            }
        }
        opts[m].apply(critic.head_mut(m), &grads, lr)?;
    }
    Ok(total_mse / critic.m as f64 + eta * penalty)
}

/// Actor loss and its parameter gradient at fixed reparameterization noise.
///
/// Per sample the loss is τ·logπ(a|s) − Q̄(s, a) with a = squash(μ + σ·ε).
/// Because u − μ = σ·ε exactly, the Gaussian quadratic term is the constant
/// −ε²/2 and drops out of the gradient; what remains per action dim is the
/// tanh volume correction, the −log σ entropy term, and the Q path:
///
///   ∂L/∂μ = τ·2t(1−t²)/(1−t²+ε_s) − ∂Q̄/∂a·half·(1−t²)
///   ∂L/∂x = [−τ + (τ·2t(1−t²)/(1−t²+ε_s) − ∂Q̄/∂a·half·(1−t²))·σε]·map′(x)
///
/// with t = tanh(u), ε_s the squash log epsilon, and x the raw log-std
/// output feeding the smooth clamp `logstd_map`.
fn policy_loss_and_grads(
    policy: &PolicyNet,
    critic: &QEnsemble,
    states: &Mat,
    eps: &Mat,
    objective: PolicyObjective,
) -> Result<(f64, Gradients)> {
    let b = states.rows();
    let ad = policy.act_dim;
    let tau = policy.entropy_temperature;

    let cache = policy.net().forward_cached(states)?;
    let out = cache.output();

    // sampled actions at the fixed noise
    let mut actions = Mat::zeros(b, ad);
    for i in 0..b {
        let o = out.row(i);
        let a = actions.row_mut(i);
        for j in 0..ad {
            let sigma = logstd_map(o[ad + j]).exp();
            a[j] = policy.squash(j, o[j] + sigma * eps.row(i)[j]);
        }
    }
    let q_input = Mat::hcat(states, &actions);

    // Q̄ and ∂Q̄/∂a per row
    let q_all = critic.q_values_all(&q_input, Which::Online)?;
    let head_grads: Vec<Mat> = critic
        .heads()
        .iter()
        .map(|h| h.scalar_input_gradients(&q_input))
        .collect::<Result<_>>()?;
    let od = policy.obs_dim;
    let mut qbar = vec![0.0; b];
    let mut dqda = Mat::zeros(b, ad);
    for i in 0..b {
        match objective {
            PolicyObjective::MeanQ => {
                qbar[i] = q_all.row(i).iter().sum::<f64>() / critic.m as f64;
                for g in &head_grads {
                    for j in 0..ad {
                        dqda.row_mut(i)[j] += g.row(i)[od + j] / critic.m as f64;
                    }
                }
            }
            PolicyObjective::MinQ => {
                let (mut best, mut best_q) = (0, q_all.row(i)[0]);
                for (m, &q) in q_all.row(i).iter().enumerate().skip(1) {
                    if q < best_q {
                        best = m;
                        best_q = q;
                    }
                }
                qbar[i] = best_q;
                dqda.row_mut(i)
                    .copy_from_slice(&head_grads[best].row(i)[od..]);
            }
        }
    }

    let mut upstream = Mat::zeros(b, 2 * ad);
    let mut loss = 0.0;
    let bf = b as f64;
    for i in 0..b {
        let o = out.row(i);
        let up = upstream.row_mut(i);
        let mut logpi = 0.0;
        for j in 0..ad {
            let x = o[ad + j];
            let s_ls = logstd_map(x);
            let sigma = s_ls.exp();
            let e = eps.row(i)[j];
            let u = o[j] + sigma * e;
            let t = u.tanh();
            let sq = 1.0 - t * t;
            let denom = sq + SQUASH_EPS;
            logpi += -0.5 * e * e
                - s_ls
                - 0.5 * (2.0 * std::f64::consts::PI).ln()
                - denom.ln()
                - policy.act_half()[j].ln();

            let tanh_term = 2.0 * t * sq / denom;
            let q_term = dqda.row(i)[j] * policy.act_half()[j] * sq;
            up[j] = (tau * tanh_term - q_term) / bf;
            up[ad + j] =
                (-tau + (tau * tanh_term - q_term) * sigma * e) * logstd_map_deriv(x) / bf;
        }
        loss += tau * logpi - qbar[i];
    }
    loss /= bf;

    let mut grads = Gradients::zeros_like(policy.net());
    policy.net().backward(&cache, &upstream, &mut grads)?;
    Ok((loss, grads))
}

/// Draw reparameterization noise, take one Adam step on the actor loss,
/// return the pre-update loss.
fn policy_step(
    policy: &mut PolicyNet,
    opt: &mut AdamState,
    critic: &QEnsemble,
    states: &Mat,
    objective: PolicyObjective,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut eps = Mat::zeros(states.rows(), policy.act_dim);
    for i in 0..states.rows() {
        for j in 0..policy.act_dim {
            eps.row_mut(i)[j] = StandardNormal.sample(rng);
        }
    }
    let (loss, grads) = policy_loss_and_grads(policy, critic, states, &eps, objective)?;
    opt.apply(policy.net_mut(), &grads, lr)?;
    Ok(loss)
}

/// One epoch of the main loop: for every mini-batch build a return grid per
/// transition, fuse the posterior, regress all online heads to the
/// conservative target, soft-update the targets, then one actor step on the
/// same states. Ends with a fixed-seed evaluation (the seed has no epoch
/// component, so every epoch replays the same episodes and the eval column
/// is comparable across rows).
pub fn cbop_train_epoch(
    agent: &mut AgentState,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<EpochMetrics> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CbopError::EmptyInput("training dataset".into()));
    }
    let epoch = agent.epoch;
    let n = dataset.len();
    let (od, ad) = (dataset.obs_dim, dataset.act_dim);
    let mut batch_rng = rng::stream(config.seed, &[rng::tags::TRAIN_BATCH, epoch as u64]);
    let mut policy_rng = rng::stream(config.seed, &[rng::tags::POLICY_STEP, epoch as u64]);

    let env = agent.env.clone();
    let terminal = |s: &[f64]| env.is_terminal(s);
    let spec = RolloutSpec {
        horizon: config.horizon,
        discount: config.gamma,
        mode: config.rollout_mode,
        propagation: config.propagation,
        reward_scale: agent.reward_scale,
        terminal: Some(&terminal),
    };

    let mut sum_actor = 0.0;
    let mut sum_critic = 0.0;
    let mut sum_target = 0.0;
    let mut sum_horizon = 0.0;

    for step in 0..config.steps_per_epoch {
        let idxs: Vec<usize> = (0..config.batch_size)
            .map(|_| batch_rng.random_range(0..n))
            .collect();

        // conservative targets
        let mut states = Mat::zeros(idxs.len(), od);
        let mut actions = Mat::zeros(idxs.len(), ad);
        let mut y = vec![0.0; idxs.len()];
        for (bi, &i) in idxs.iter().enumerate() {
            let tr = dataset.transition(i);
            let s: Vec<f64> = tr.s.iter().map(|&v| v as f64).collect();
            let a: Vec<f64> = tr.a.iter().map(|&v| v as f64).collect();
            let s2: Vec<f64> = tr.s2.iter().map(|&v| v as f64).collect();
            let grid = sample_returns(
                Sarsd {
                    s: &s,
                    a: &a,
                    r: tr.r as f64,
                    s2: &s2,
                    done: tr.done,
                },
                &agent.policy,
                &agent.dynamics,
                &agent.critic,
                &spec,
                rng::derive_path(config.seed, &[rng::tags::ROLLOUT, epoch as u64, i as u64]),
            )?;
            let params = likelihood_params(&grid);
            let post = posterior(&params);
            y[bi] = target_estimate(&grid, &post, &config.estimator)?;
            if !y[bi].is_finite() {
                return Err(CbopError::Divergence {
                    context: format!(
                        "epoch {epoch} step {step}: non-finite target for transition {i}"
                    ),
                });
            }
            sum_target += y[bi] / agent.reward_scale;
            sum_horizon += post.expected_horizon;
            states.row_mut(bi).copy_from_slice(&s);
            actions.row_mut(bi).copy_from_slice(&a);
        }

        let input = Mat::hcat(&states, &actions);
        let critic_loss = critic_step(
            &mut agent.critic,
            &mut agent.critic_opts,
            &input,
            &y,
            config.eta,
            config.lr_critic,
        )?;
        if !critic_loss.is_finite() || critic_loss > TRAIN_DIVERGENCE_LIMIT {
            return Err(CbopError::Divergence {
                context: format!("epoch {epoch} step {step}: critic loss {critic_loss}"),
            });
        }
        agent.critic.soft_update(config.target_update_rate);

        let actor_loss = policy_step(
            &mut agent.policy,
            &mut agent.policy_opt,
            &agent.critic,
            &states,
            config.policy_objective,
            config.lr_actor,
            &mut policy_rng,
        )?;
        if !actor_loss.is_finite() || actor_loss.abs() > TRAIN_DIVERGENCE_LIMIT {
            return Err(CbopError::Divergence {
                context: format!("epoch {epoch} step {step}: actor loss {actor_loss}"),
            });
        }
        sum_actor += actor_loss;
        sum_critic += critic_loss;
    }

    let eval = evaluate_policy(&agent.policy, &agent.env, config.eval_episodes, config.seed)?;
    let per_target = (config.steps_per_epoch * config.batch_size) as f64;
    agent.epoch += 1;
    let metrics = EpochMetrics {
        epoch: agent.epoch,
        actor_loss: sum_actor / config.steps_per_epoch as f64,
        critic_loss: sum_critic / config.steps_per_epoch as f64,
        mean_target: sum_target / per_target,
        mean_expected_horizon: sum_horizon / per_target,
        eval_return: eval.mean_return,
        normalized_score: eval.normalized_score,
    };
    agent.metrics.push(metrics);
    Ok(metrics)
}
