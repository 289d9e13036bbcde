//! Columnar transition datasets. Values are held as `f32` (matching the
//! on-disk format exactly, so save/load round trips are byte identical);
//! all statistics over them are accumulated in `f64` in index order.

use serde::{Deserialize, Serialize};

use super::behavior::{controller_action, BehaviorTag};
use super::env::EnvSpec;
use crate::error::{CbopError, Result};
use crate::rng;

/// Per-dimension normalization statistics, plus the delta/reward moments the
/// dynamics model trains against. Stds are population stds without flooring;
/// consumers clamp at use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub delta_mean: Vec<f64>,
    pub delta_std: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
}

/// One logged transition, borrowed from the columns.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub s: &'a [f32],
    pub a: &'a [f32],
    pub r: f32,
    pub s2: &'a [f32],
    pub done: bool,
    pub initial: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub env_id: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub tag: BehaviorTag,
    pub seed: u64,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    dones: Vec<bool>,
    initials: Vec<bool>,
    stats: NormStats,
}

impl Dataset {
    /// Assemble from raw columns, validating lengths and finiteness and
    /// computing stats.
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(
        env_id: String,
        obs_dim: usize,
        act_dim: usize,
        tag: BehaviorTag,
        seed: u64,
        states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Vec<f32>,
        next_states: Vec<f32>,
        dones: Vec<bool>,
        initials: Vec<bool>,
    ) -> Result<Self> {
        let n = rewards.len();
        if n == 0 {
            return Err(CbopError::EmptyInput("dataset has no transitions".into()));
        }
        let checks = [
            ("states", states.len(), n * obs_dim),
            ("actions", actions.len(), n * act_dim),
            ("next_states", next_states.len(), n * obs_dim),
            ("dones", dones.len(), n),
            ("initials", initials.len(), n),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(CbopError::shape(&format!("dataset column {name}"), want, got));
            }
        }
        for (name, col) in [
            ("states", &states),
            ("actions", &actions),
            ("rewards", &rewards),
            ("next_states", &next_states),
        ] {
            if !col.iter().all(|v| v.is_finite()) {
                return Err(CbopError::non_finite(format!("dataset column {name}")));
            }
        }
        let stats = compute_stats(obs_dim, act_dim, &states, &actions, &rewards, &next_states);
        Ok(Dataset {
            env_id,
            obs_dim,
            act_dim,
            tag,
            seed,
            states,
            actions,
            rewards,
            next_states,
            dones,
            initials,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn transition(&self, i: usize) -> Transition<'_> {
        let (od, ad) = (self.obs_dim, self.act_dim);
        Transition {
            s: &self.states[i * od..(i + 1) * od],
            a: &self.actions[i * ad..(i + 1) * ad],
            r: self.rewards[i],
            s2: &self.next_states[i * od..(i + 1) * od],
            done: self.dones[i],
            initial: self.initials[i],
        }
    }

    pub fn columns(&self) -> (&[f32], &[f32], &[f32], &[f32], &[bool], &[bool]) {
        (
            &self.states,
            &self.actions,
            &self.rewards,
            &self.next_states,
            &self.dones,
            &self.initials,
        )
    }

    pub fn initial_state_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.initials[i]).collect()
    }

    /// Episode boundaries as (start, end) index ranges, derived from the
    /// initial flags. The last episode may be truncated by dataset size.
    pub fn episodes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0usize;
        for i in 1..self.len() {
            if self.initials[i] {
                out.push((start, i));
                start = i;
            }
        }
        out.push((start, self.len()));
        out
    }

    /// Undiscounted return of every episode.
    pub fn episode_returns(&self) -> Vec<f64> {
        self.episodes()
            .iter()
            .map(|&(a, b)| self.rewards[a..b].iter().map(|&r| r as f64).sum())
            .collect()
    }

    pub fn mean_episode_return(&self) -> f64 {
        let rets = self.episode_returns();
        rets.iter().sum::<f64>() / rets.len() as f64
    }

    /// Discounted Monte-Carlo return of every episode, from its first state.
    pub fn discounted_returns(&self, gamma: f64) -> Vec<f64> {
        self.episodes()
            .iter()
            .map(|&(a, b)| {
                let mut acc = 0.0;
                for i in (a..b).rev() {
                    acc = self.rewards[i] as f64 + gamma * acc;
                }
                acc
            })
            .collect()
    }
}

/// Population mean/std per dimension, accumulated in f64 in index order.
fn moments(data: &[f32], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() / dim;
    let mut mean = vec![0.0f64; dim];
    for row in data.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; dim];
    for row in data.chunks_exact(dim) {
        for (va, (&v, m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
            let d = v as f64 - m;
            *va += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    (mean, std)
}

pub fn compute_stats(
    obs_dim: usize,
    act_dim: usize,
    states: &[f32],
    actions: &[f32],
    rewards: &[f32],
    next_states: &[f32],
) -> NormStats {
    let (state_mean, state_std) = moments(states, obs_dim);
    let (action_mean, action_std) = moments(actions, act_dim);
    // deltas in f64 from the stored f32 values
    let deltas: Vec<f32> = next_states
        .iter()
        .zip(states)
        .map(|(&n, &s)| ((n as f64) - (s as f64)) as f32)
        .collect();
    let (delta_mean, delta_std) = moments(&deltas, obs_dim);
    let (rm, rs) = moments(rewards, 1);
    NormStats {
        state_mean,
        state_std,
        action_mean,
        action_std,
        delta_mean,
        delta_std,
        reward_mean: rm[0],
        reward_std: rs[0],
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub env_id: String,
    pub tag: BehaviorTag,
    pub size: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Roll scripted episodes until `size` transitions are logged. Mixed tags
/// are concatenations of per-quality blocks; the final episode of a block is
/// truncated mid-flight if the block budget fills.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    let env = EnvSpec::by_id(&cfg.env_id)?;
    if cfg.size == 0 {
        return Err(CbopError::InvalidConfig("dataset size must be positive".into()));
    }
    if !cfg.noise_scale.is_finite() || cfg.noise_scale < 0.0 {
        return Err(CbopError::InvalidConfig(format!(
            "noise_scale must be finite and non-negative, got {}",
            cfg.noise_scale
        )));
    }

    let comp = cfg.tag.composition();
    // integer block sizes; remainder goes to the last block
    let mut block_sizes: Vec<usize> = comp
        .iter()
        .map(|(_, frac)| (cfg.size as f64 * frac).floor() as usize)
        .collect();
    let assigned: usize = block_sizes.iter().sum();
    *block_sizes.last_mut().unwrap() += cfg.size - assigned;

    let mut states = Vec::with_capacity(cfg.size * env.obs_dim);
    let mut actions = Vec::with_capacity(cfg.size * env.act_dim);
    let mut rewards = Vec::with_capacity(cfg.size);
    let mut next_states = Vec::with_capacity(cfg.size * env.obs_dim);
    let mut dones = Vec::with_capacity(cfg.size);
    let mut initials = Vec::with_capacity(cfg.size);

    for (block, (&(quality, _), &block_size)) in comp.iter().zip(&block_sizes).enumerate() {
        let mut logged = 0usize;
        let mut episode = 0u64;
        while logged < block_size {
            let mut ep_rng = rng::stream(
                cfg.seed,
                &[rng::tags::DATA_EPISODE, block as u64, episode],
            );
            let mut s = env.sample_initial(&mut ep_rng);
            for t in 0..env.max_episode_len {
                let a = controller_action(&env, quality, &s, cfg.noise_scale, &mut ep_rng);
                let (s2, r, done) = env.step(&s, &a)?;
                states.extend(s.iter().map(|&v| v as f32));
                actions.extend(a.iter().map(|&v| v as f32));
                rewards.push(r as f32);
                next_states.extend(s2.iter().map(|&v| v as f32));
                dones.push(done);
                initials.push(t == 0);
                logged += 1;
                s = s2;
                if done || logged == block_size {
                    break;
                }
            }
            episode += 1;
        }
    }

    Dataset::from_columns(
        env.id.to_string(),
        env.obs_dim,
        env.act_dim,
        cfg.tag,
        cfg.seed,
        states,
        actions,
        rewards,
        next_states,
        dones,
        initials,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::behavior::{measure_controller_return, Quality};

    fn gen(env_id: &str, tag: BehaviorTag, size: usize, seed: u64) -> Dataset {
        generate_dataset(&GenConfig {
            env_id: env_id.into(),
            tag,
            size,
            noise_scale: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn exact_size_and_flags() {
        let ds = gen("point_mass_2d", BehaviorTag::Random, 1001, 3);
        assert_eq!(ds.len(), 1001);
        assert!(ds.transition(0).initial);
        let n_eps = ds.initial_state_indices().len();
        // 200-step episodes, so about five full episodes plus a truncated one
        assert_eq!(n_eps, 6);
        assert_eq!(ds.episodes().len(), n_eps);
    }

    #[test]
    fn hopper_random_episodes_terminate_early() {
        let ds = gen("hopper_toy", BehaviorTag::Random, 2000, 11);
        let eps = ds.episodes();
        assert!(eps.len() > 50, "expected many short episodes, got {}", eps.len());
        // done flag set on the last transition of terminated episodes
        let (a, b) = eps[0];
        assert!(b - a < 200);
        assert!(ds.transition(b - 1).done);
        for i in a..b - 1 {
            assert!(!ds.transition(i).done);
        }
    }

    #[test]
    fn point_mass_never_terminates() {
        let ds = gen("point_mass_2d", BehaviorTag::Medium, 800, 5);
        for i in 0..ds.len() {
            assert!(!ds.transition(i).done);
        }
    }

    /// Logged mean return of a random-tag dataset should agree with the
    /// frozen random reference score within 10%.
    #[test]
    fn random_tag_matches_reference_score() {
        let env = EnvSpec::by_id("point_mass_2d").unwrap();
        let ds = gen("point_mass_2d", BehaviorTag::Random, 10_000, 21);
        // drop the final (possibly truncated) episode from the average
        let rets = ds.episode_returns();
        let full = &rets[..rets.len() - 1];
        let mean = full.iter().sum::<f64>() / full.len() as f64;
        let rel = (mean - env.ref_random_score).abs() / env.ref_random_score.abs();
        assert!(
            rel < 0.10,
            "random-tag mean return {mean} vs reference {} (rel {rel})",
            env.ref_random_score
        );
    }

    /// Expert-tag datasets must log strictly higher mean returns than
    /// random-tag ones, for every environment.
    #[test]
    fn behavior_ordering_in_logged_returns() {
        for env in EnvSpec::all() {
            let expert = gen(env.id, BehaviorTag::Expert, 4000, 9);
            let random = gen(env.id, BehaviorTag::Random, 4000, 9);
            assert!(
                expert.mean_episode_return() > random.mean_episode_return(),
                "{}: expert {} <= random {}",
                env.id,
                expert.mean_episode_return(),
                random.mean_episode_return()
            );
        }
    }

    #[test]
    fn mixed_tag_spans_qualities() {
        let ds = gen("point_mass_2d", BehaviorTag::Mixed, 3000, 13);
        assert_eq!(ds.len(), 3000);
        let rets = ds.episode_returns();
        let lo = rets.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // random episodes are far worse than expert ones
        assert!(hi - lo > 100.0, "mixed returns span only {lo}..{hi}");
    }

    #[test]
    fn stats_are_recomputable_and_sane() {
        let ds = gen("pendulum_swing", BehaviorTag::Medium, 2000, 17);
        let (s, a, r, s2, _, _) = ds.columns();
        let re = compute_stats(ds.obs_dim, ds.act_dim, s, a, r, s2);
        assert_eq!(&re, ds.stats());
        // cos/sin observations live in [-1, 1]
        assert!(ds.stats().state_mean[0].abs() <= 1.0);
        assert!(ds.stats().state_std.iter().all(|&v| v.is_finite() && v >= 0.0));
    }

    #[test]
    fn discounted_returns_match_manual_fold() {
        let ds = gen("point_mass_2d", BehaviorTag::Random, 400, 101);
        let (a, b) = ds.episodes()[0];
        let gamma = 0.9;
        let mut want = 0.0;
        for i in (a..b).rev() {
            want = ds.transition(i).r as f64 + gamma * want;
        }
        assert!((ds.discounted_returns(gamma)[0] - want).abs() < 1e-12);
    }

    /// Degenerate single-quality data still yields usable stats (zero stds
    /// allowed; consumers clamp).
    #[test]
    fn constant_columns_give_zero_std() {
        let ds = Dataset::from_columns(
            "point_mass_2d".into(),
            1,
            1,
            BehaviorTag::Random,
            0,
            vec![1.0; 4],
            vec![0.5; 4],
            vec![2.0; 4],
            vec![1.0; 4],
            vec![false; 4],
            vec![true, false, false, false],
        )
        .unwrap();
        assert_eq!(ds.stats().state_std[0], 0.0);
        assert_eq!(ds.stats().reward_std, 0.0);
    }

    #[test]
    fn medium_sits_between_random_and_expert() {
        for env in EnvSpec::all() {
            let r = measure_controller_return(&env, Quality::Random, 1.0, 40, 23);
            let m = measure_controller_return(&env, Quality::Medium, 1.0, 40, 23);
            let e = measure_controller_return(&env, Quality::Expert, 1.0, 40, 23);
            assert!(r < m && m < e, "{}: {r} {m} {e}", env.id);
        }
    }
}
