//! Scripted behavior policies used to generate offline datasets.
//!
//! Three controller qualities per environment: `Random` samples the action
//! box uniformly, `Expert` is a tuned hand controller, and `Medium` is a
//! detuned, noisier variant of the expert. Dataset tags compose these.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::env::{EnvKind, EnvSpec};
use crate::error::{CbopError, Result};
use crate::rng;

/// Dataset composition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorTag {
    Random,
    Medium,
    MediumReplay,
    Expert,
    Mixed,
}

impl BehaviorTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BehaviorTag::Random),
            "medium" => Ok(BehaviorTag::Medium),
            "medium-replay" => Ok(BehaviorTag::MediumReplay),
            "expert" => Ok(BehaviorTag::Expert),
            "mixed" => Ok(BehaviorTag::Mixed),
            _ => Err(CbopError::InvalidConfig(format!(
                "unknown behavior tag {s:?} (expected random, medium, medium-replay, expert, mixed)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BehaviorTag::Random => "random",
            BehaviorTag::Medium => "medium",
            BehaviorTag::MediumReplay => "medium-replay",
            BehaviorTag::Expert => "expert",
            BehaviorTag::Mixed => "mixed",
        }
    }

    /// Controller qualities and their share of the requested transitions.
    pub fn composition(&self) -> Vec<(Quality, f64)> {
        match self {
            BehaviorTag::Random => vec![(Quality::Random, 1.0)],
            BehaviorTag::Medium => vec![(Quality::Medium, 1.0)],
            BehaviorTag::Expert => vec![(Quality::Expert, 1.0)],
            BehaviorTag::MediumReplay => {
                vec![(Quality::Random, 0.5), (Quality::Medium, 0.5)]
            }
            BehaviorTag::Mixed => vec![
                (Quality::Random, 1.0 / 3.0),
                (Quality::Medium, 1.0 / 3.0),
                (Quality::Expert, 1.0 / 3.0),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Random,
    Medium,
    Expert,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One action from the scripted controller. `noise_scale` multiplies the
/// controller's exploration noise; the random controller ignores it.
pub fn controller_action(
    env: &EnvSpec,
    quality: Quality,
    s: &[f64],
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut a = match quality {
        Quality::Random => {
            return env
                .action_low
                .iter()
                .zip(&env.action_high)
                .map(|(&lo, &hi)| rng.random_range(lo..hi))
                .collect()
        }
        Quality::Expert => expert_action(env.kind, s),
        Quality::Medium => medium_action(env.kind, s),
    };
    let noise_std = match quality {
        Quality::Expert => 0.05 * noise_scale,
        Quality::Medium => 0.35 * noise_scale,
        Quality::Random => 0.0,
    };
    if noise_std > 0.0 {
        for v in &mut a {
            *v += noise_std * normal(rng);
        }
    }
    env.clamp_action(&a)
}

fn expert_action(kind: EnvKind, s: &[f64]) -> Vec<f64> {
    match kind {
        // critically damped pull to the origin
        EnvKind::PointMass2d => vec![-4.0 * s[0] - 4.0 * s[2], -4.0 * s[1] - 4.0 * s[3]],
        EnvKind::PendulumSwing => vec![pendulum_control(s, 0.6, 1.05, 10.0, 2.0, 2.5)],
        EnvKind::HopperToy => {
            let (z, vz, _vx, phi, omega) = (s[0], s[1], s[2], s[3], s[4]);
            let thrust = 9.8 / 12.0 + 1.2 * (1.2 - z) - 0.6 * vz;
            let tilt = 4.0 * (0.25 - phi) - 1.2 * omega;
            vec![thrust, tilt]
        }
    }
}

fn medium_action(kind: EnvKind, s: &[f64]) -> Vec<f64> {
    match kind {
        // settles on an off-origin point: stable but pays a steady state cost,
        // so the logged data is structured yet clearly suboptimal
        EnvKind::PointMass2d => vec![
            -1.2 * (s[0] - 1.0) - 1.1 * s[2],
            -1.2 * (s[1] + 0.8) - 1.1 * s[3],
        ],
        // pump-only controller aiming just under the upright energy: it
        // keeps sweeping close past the top without ever balancing there
        EnvKind::PendulumSwing => vec![pendulum_control(s, 0.5, 0.95, 0.0, 0.0, 0.0)],
        EnvKind::HopperToy => {
            let (z, vz, _vx, phi, omega) = (s[0], s[1], s[2], s[3], s[4]);
            let thrust = 9.8 / 12.0 + 0.8 * (1.15 - z) - 0.4 * vz;
            let tilt = 2.5 * (0.12 - phi) - 0.8 * omega;
            vec![thrust, tilt]
        }
    }
}

/// Energy-shaping swing-up with a linear balance law near the top.
/// `pump_gain` scales the energy feedback and `energy_frac` sets the target
/// as a fraction of the upright energy; aiming slightly past 1.0 makes the
/// swing actually reach the capture region instead of stalling under it.
/// `kp`/`kd` take over inside the window where +-2 torque can win against
/// gravity (|theta| < 0.45, speed below `capture_speed`).
fn pendulum_control(
    s: &[f64],
    pump_gain: f64,
    energy_frac: f64,
    kp: f64,
    kd: f64,
    capture_speed: f64,
) -> f64 {
    let th = s[1].atan2(s[0]);
    let thdot = s[2];
    if th.abs() < 0.45 && thdot.abs() < capture_speed {
        return -kp * th - kd * thdot;
    }
    // rod inertia 1/3, upright potential energy +5 relative to the pivot
    let energy = thdot * thdot / 6.0 + 5.0 * th.cos();
    let target = 5.0 * energy_frac;
    if thdot.abs() < 0.1 && th.cos() < -0.5 {
        return 2.0; // break the hanging rest symmetrically
    }
    pump_gain * (target - energy) * thdot
}

/// Mean undiscounted return of a scripted controller, measured by rolling
/// real episodes. Used to freeze the reference scores and by tests.
pub fn measure_controller_return(
    env: &EnvSpec,
    quality: Quality,
    noise_scale: f64,
    episodes: usize,
    seed: u64,
) -> f64 {
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut r = rng::stream(seed, &[rng::tags::EVAL, ep as u64]);
        let mut s = env.sample_initial(&mut r);
        let mut ret = 0.0;
        for _ in 0..env.max_episode_len {
            let a = controller_action(env, quality, &s, noise_scale, &mut r);
            let (s2, rew, done) = env.step(&s, &a).expect("scripted rollout");
            ret += rew;
            s = s2;
            if done {
                break;
            }
        }
        total += ret;
    }
    total / episodes as f64
}
