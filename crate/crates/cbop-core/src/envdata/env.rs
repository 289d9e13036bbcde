//! Three small control tasks with analytic dynamics. All use dt = 0.05 and a
//! 200-step episode cap. Rewards are evaluated at the pre-step state with the
//! clamped action, so reward is a pure function of (s, a).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CbopError, Result};

pub const DT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// 2-D double integrator steering to the origin.
    /// obs = (px, py, vx, vy), act = acceleration in [-1, 1]^2.
    PointMass2d,
    /// Torque-limited pendulum swing-up, angle measured from upright.
    /// obs = (cos th, sin th, thdot), act = torque in [-2, 2].
    PendulumSwing,
    /// Planar hopper caricature: keep altitude, lean to move forward.
    /// obs = (z, vz, vx, phi, omega), act = (thrust, tilt) in [-1, 1]^2.
    /// Terminates when it falls (z < 0.5) or tips over (|phi| > 1).
    HopperToy,
}

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub id: &'static str,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_len: usize,
    /// Frozen mean undiscounted return of the uniform-random policy
    /// (200 episodes, fixed measurement seed). Anchors normalized scores.
    pub ref_random_score: f64,
    /// Same measurement for the scripted expert controller.
    pub ref_expert_score: f64,
}

impl EnvSpec {
    pub fn point_mass() -> Self {
        EnvSpec {
            kind: EnvKind::PointMass2d,
            id: "point_mass_2d",
            obs_dim: 4,
            act_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            max_episode_len: 200,
            ref_random_score: REF_SCORES[0].1,
            ref_expert_score: REF_SCORES[0].2,
        }
    }

    pub fn pendulum() -> Self {
        EnvSpec {
            kind: EnvKind::PendulumSwing,
            id: "pendulum_swing",
            obs_dim: 3,
            act_dim: 1,
            action_low: vec![-2.0],
            action_high: vec![2.0],
            max_episode_len: 200,
            ref_random_score: REF_SCORES[1].1,
            ref_expert_score: REF_SCORES[1].2,
        }
    }

    pub fn hopper() -> Self {
        EnvSpec {
            kind: EnvKind::HopperToy,
            id: "hopper_toy",
            obs_dim: 5,
            act_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            max_episode_len: 200,
            ref_random_score: REF_SCORES[2].1,
            ref_expert_score: REF_SCORES[2].2,
        }
    }

    pub fn all() -> Vec<EnvSpec> {
        vec![Self::point_mass(), Self::pendulum(), Self::hopper()]
    }

    pub fn by_id(id: &str) -> Result<EnvSpec> {
        Self::all()
            .into_iter()
            .find(|e| e.id == id)
            .ok_or_else(|| CbopError::UnknownEnv(id.to_string()))
    }

    pub fn clamp_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
            .collect()
    }

    /// One transition: returns (next state, reward, next state is terminal).
    /// Actions outside the box are clamped first.
    pub fn step(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        if s.len() != self.obs_dim {
            return Err(CbopError::shape("env step state", self.obs_dim, s.len()));
        }
        if a.len() != self.act_dim {
            return Err(CbopError::shape("env step action", self.act_dim, a.len()));
        }
        let a = self.clamp_action(a);
        let (s2, r) = match self.kind {
            EnvKind::PointMass2d => step_point_mass(s, &a),
            EnvKind::PendulumSwing => step_pendulum(s, &a),
            EnvKind::HopperToy => step_hopper(s, &a),
        };
        let done = self.is_terminal(&s2);
        Ok((s2, r, done))
    }

    /// Terminal-state predicate on observations. Only the hopper terminates.
    pub fn is_terminal(&self, s: &[f64]) -> bool {
        match self.kind {
            EnvKind::PointMass2d | EnvKind::PendulumSwing => false,
            EnvKind::HopperToy => s[0] < 0.5 || s[3].abs() > 1.0,
        }
    }

    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self.kind {
            EnvKind::PointMass2d => vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ],
            EnvKind::PendulumSwing => {
                let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let thdot = rng.random_range(-1.0..1.0);
                vec![th.cos(), th.sin(), thdot]
            }
            EnvKind::HopperToy => vec![
                rng.random_range(1.1..1.3),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.1..0.1),
            ],
        }
    }

    /// Benchmark-style rescaling anchored at the frozen reference scores:
    /// 0 = random policy, 100 = scripted expert.
    pub fn normalized_score(&self, raw_return: f64) -> f64 {
        100.0 * (raw_return - self.ref_random_score)
            / (self.ref_expert_score - self.ref_random_score)
    }
}

fn step_point_mass(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    let r = -(s[0] * s[0] + s[1] * s[1]) - 0.01 * (a[0] * a[0] + a[1] * a[1]);
    let vx = (s[2] + DT * a[0]).clamp(-2.0, 2.0);
    let vy = (s[3] + DT * a[1]).clamp(-2.0, 2.0);
    let px = (s[0] + DT * vx).clamp(-3.0, 3.0);
    let py = (s[1] + DT * vy).clamp(-3.0, 3.0);
    (vec![px, py, vx, vy], r)
}

fn wrap_angle(th: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (th + std::f64::consts::PI).rem_euclid(two_pi);
    if t < 0.0 {
        t += two_pi;
    }
    t - std::f64::consts::PI
}

fn step_pendulum(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    let th = s[1].atan2(s[0]);
    let thdot = s[2];
    let u = a[0];
    let r = -(th * th + 0.1 * thdot * thdot + 0.001 * u * u);
    // rod pendulum, g = 10, m = l = 1; theta = 0 is upright (unstable)
    let thdot2 = (thdot + DT * (15.0 * th.sin() + 3.0 * u)).clamp(-8.0, 8.0);
    let th2 = wrap_angle(th + DT * thdot2);
    (vec![th2.cos(), th2.sin(), thdot2], r)
}

fn step_hopper(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    let (z, vz, vx, phi, omega) = (s[0], s[1], s[2], s[3], s[4]);
    let (thrust, tilt) = (a[0], a[1]);
    let r = 1.0 + vx - 0.05 * (thrust * thrust + tilt * tilt);
    let vz2 = (vz + DT * (12.0 * thrust - 9.8)).clamp(-5.0, 5.0);
    let z2 = (z + DT * vz2).clamp(0.0, 3.0);
    let omega2 = (omega + DT * 6.0 * tilt).clamp(-5.0, 5.0);
    let phi2 = (phi + DT * omega2).clamp(-1.5, 1.5);
    let vx2 = (vx + DT * (4.0 * phi2 - 0.6 * vx)).clamp(-2.0, 3.0);
    (vec![z2, vz2, vx2, phi2, omega2], r)
}

/// (env id, random-policy score, expert score). Measured once with
/// `measure_reference_scores` (200 episodes, seed 0xE0A1) and frozen here;
/// the test suite re-measures and checks agreement.
const REF_SCORES: [(&str, f64, f64); 3] = [
    ("point_mass_2d", -646.6899316044022, -10.050690262546318),
    ("pendulum_swing", -1213.7556904612775, -154.29822247895066),
    ("hopper_toy", 7.533777823250414, 462.6773939529936),
];
