//! Online evaluation of a trained policy and the conservatism-gap
//! diagnostic (critic value minus Monte-Carlo return from the same state).

use rand::Rng;

use super::policy::PolicyNet;
use crate::envdata::{Dataset, EnvSpec};
use crate::error::{CbopError, Result};
use crate::mat::Mat;
use crate::qensemble::{QEnsemble, Which};
use crate::rng;

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mean_return: f64,
    pub normalized_score: f64,
    pub returns: Vec<f64>,
}

/// Roll the deterministic head for `episodes` episodes and report raw and
/// normalized scores. Episode e uses its own seed stream, so results do not
/// depend on the episode count requested alongside.
pub fn evaluate_policy(
    policy: &PolicyNet,
    env: &EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(CbopError::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut r = rng::stream(seed, &[rng::tags::EVAL, e as u64]);
        let mut s = env.sample_initial(&mut r);
        let mut total = 0.0;
        for _ in 0..env.max_episode_len {
            let a = policy.act_mean_one(&s)?;
            let (s2, reward, done) = env.step(&s, &a)?;
            total += reward;
            s = s2;
            if done {
                break;
            }
        }
        returns.push(total);
    }
    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok(EvalResult {
        mean_return,
        normalized_score: env.normalized_score(mean_return),
        returns,
    })
}

#[derive(Debug, Clone)]
pub struct GapRow {
    /// dataset row the start state came from
    pub index: usize,
    /// mean-head Q(s, π(s)) in raw reward units
    pub critic_value: f64,
    /// discounted Monte-Carlo return of the deterministic policy from s
    pub mc_return: f64,
}

#[derive(Debug, Clone)]
pub struct GapResult {
    pub mean_gap: f64,
    pub max_gap: f64,
    pub rows: Vec<GapRow>,
}

/// Sample dataset states, compare what the critic believes about the policy
/// there against a ground-truth discounted rollout in the real environment.
/// Negative gaps mean the critic is conservative.
pub fn conservatism_gap(
    policy: &PolicyNet,
    critic: &QEnsemble,
    env: &EnvSpec,
    dataset: &Dataset,
    count: usize,
    gamma: f64,
    reward_scale: f64,
    seed: u64,
) -> Result<GapResult> {
    if dataset.is_empty() {
        return Err(CbopError::EmptyInput("conservatism gap dataset".into()));
    }
    if count == 0 {
        return Err(CbopError::InvalidConfig("conservatism gap needs count >= 1".into()));
    }
    if reward_scale <= 0.0 || !reward_scale.is_finite() {
        return Err(CbopError::InvalidConfig(format!(
            "reward scale must be positive and finite, got {reward_scale}"
        )));
    }
    let mut r = rng::stream(seed, &[rng::tags::DIAG]);
    let mut rows = Vec::with_capacity(count);
    let mut total = 0.0;
    let mut max_gap = f64::NEG_INFINITY;
    for _ in 0..count {
        let index = r.random_range(0..dataset.len());
        let tr = dataset.transition(index);
        let s0: Vec<f64> = tr.s.iter().map(|&v| v as f64).collect();

        let a0 = policy.act_mean_one(&s0)?;
        let mut sa = Mat::zeros(1, s0.len() + a0.len());
        sa.row_mut(0)[..s0.len()].copy_from_slice(&s0);
        sa.row_mut(0)[s0.len()..].copy_from_slice(&a0);
        let q = critic.q_values_all(&sa, Which::Online)?;
        let critic_value = q.row(0).iter().sum::<f64>() / critic.m as f64 / reward_scale;

        // true discounted return of the deterministic policy from s0
        let mut s = s0;
        let mut mc_return = 0.0;
        let mut disc = 1.0;
        for _ in 0..env.max_episode_len {
            let a = policy.act_mean_one(&s)?;
            let (s2, reward, done) = env.step(&s, &a)?;
            mc_return += disc * reward;
            disc *= gamma;
            s = s2;
            if done {
                break;
            }
        }

        let gap = critic_value - mc_return;
        total += gap;
        if gap > max_gap {
            max_gap = gap;
        }
        rows.push(GapRow {
            index,
            critic_value,
            mc_return,
        });
    }
    Ok(GapResult {
        mean_gap: total / count as f64,
        max_gap,
        rows,
    })
}
