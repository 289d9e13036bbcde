//! Shared fixtures for the benchmarks in `benches/`.
//!
//! Everything here is hand-assembled rather than trained: benchmark timings
//! only depend on shapes, and construction has to be cheap because Criterion
//! re-runs the harness in test mode under `cargo test`.

use cbop_core::bayesmve::{FnPolicy, RolloutSpec, Sarsd};
use cbop_core::dynamics::{DynamicsEnsemble, IoNorm};
use cbop_core::funcapprox::{DenseNet, Hidden, Output};
use cbop_core::qensemble::QEnsemble;
use cbop_core::{rng, Mat};

pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 2;
pub const HORIZON: usize = 10;
pub const K_MEMBERS: usize = 5;
pub const M_HEADS: usize = 10;

/// Five randomly initialized probabilistic dynamics members over a
/// point-mass-sized observation space, all elite.
pub fn dynamics_fixture() -> DynamicsEnsemble {
    let sizes = [OBS_DIM + ACT_DIM, 64, 64, 2 * (OBS_DIM + 1)];
    let members: Vec<DenseNet> = (0..K_MEMBERS)
        .map(|k| {
            let mut r = rng::stream(11, &[k as u64]);
            DenseNet::new(&sizes, Hidden::Relu, Output::Identity, &mut r)
        })
        .collect();
    DynamicsEnsemble::from_parts(
        members,
        (0..K_MEMBERS).collect(),
        OBS_DIM,
        ACT_DIM,
        IoNorm::identity(OBS_DIM, ACT_DIM),
    )
    .expect("bench ensemble shapes are static")
}

pub fn critic_fixture() -> QEnsemble {
    QEnsemble::new(M_HEADS, OBS_DIM, ACT_DIM, &[32, 32], Hidden::Relu, 12)
        .expect("bench critic shapes are static")
}

pub fn policy_fixture() -> FnPolicy<impl Fn(&[f64]) -> Vec<f64>> {
    FnPolicy(|s: &[f64]| vec![0.4 * s[0].tanh(), -0.4 * s[1].tanh()])
}

pub fn transition_fixture() -> Sarsd<'static> {
    Sarsd {
        s: &[0.3, -0.2, 0.12, 0.05],
        a: &[0.1, -0.3],
        r: -0.4,
        s2: &[0.31, -0.21, 0.11, 0.02],
        done: false,
    }
}

pub fn rollout_spec() -> RolloutSpec<'static> {
    RolloutSpec::new(HORIZON, 0.99)
}

/// Deterministic input batch for the raw network benchmarks.
pub fn input_batch(rows: usize, cols: usize) -> Mat {
    let data: Vec<f64> = (0..rows * cols)
        .map(|i| ((i * 2654435761 % 1000) as f64) / 500.0 - 1.0)
        .collect();
    Mat::from_vec(rows, cols, data)
}
