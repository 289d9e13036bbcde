//! Offline pretraining: behavior cloning for the policy, fitted Q
//! evaluation for the critics, and FQE-based offline ranking of trained
//! policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::PolicyNet;
use crate::envdata::Dataset;
use crate::error::{CbopError, Result};
use crate::funcapprox::{AdamState, Gradients};
use crate::mat::Mat;
use crate::qensemble::{QEnsemble, Which};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BcReport {
    pub initial_val_mse: f64,
    pub final_val_mse: f64,
    pub epoch_train_mse: Vec<f64>,
}

/// Mean squared error of the deterministic head against logged actions.
fn bc_mse(policy: &PolicyNet, states: &Mat, actions: &Mat) -> Result<f64> {
    let pred = policy.act_mean(states)?;
    let mut total = 0.0;
    for i in 0..states.rows() {
        for (p, t) in pred.row(i).iter().zip(actions.row(i)) {
            total += (p - t) * (p - t);
        }
    }
    Ok(total / (states.rows() * actions.cols()).max(1) as f64)
}

/// Fit the deterministic policy head to the logged actions by MSE.
/// Gradients flow through the tanh squash; the log-std head is untouched.
pub fn bc_pretrain(policy: &mut PolicyNet, dataset: &Dataset, config: &BcConfig) -> Result<BcReport> {
    if dataset.is_empty() {
        return Err(CbopError::EmptyInput("behavior cloning dataset".into()));
    }
    let n = dataset.len();
    let (od, ad) = (dataset.obs_dim, dataset.act_dim);
    let mut states = Mat::zeros(n, od);
    let mut actions = Mat::zeros(n, ad);
    for i in 0..n {
        let tr = dataset.transition(i);
        for (j, &v) in tr.s.iter().enumerate() {
            states.row_mut(i)[j] = v as f64;
        }
        for (j, &v) in tr.a.iter().enumerate() {
            actions.row_mut(i)[j] = v as f64;
        }
    }

    // held-out rows for the before/after report
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(config.seed, &[rng::tags::BC]);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (train_idx, val_idx) = if n > 1 {
        order.split_at(n - n_val)
    } else {
        (&order[..], &order[..])
    };
    let gather = |rows: &[usize], src: &Mat| {
        let mut out = Mat::zeros(rows.len(), src.cols());
        for (i, &row) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(row));
        }
        out
    };
    let val_s = gather(val_idx, &states);
    let val_a = gather(val_idx, &actions);
    let initial_val_mse = bc_mse(policy, &val_s, &val_a)?;

    let mut adam = AdamState::new(policy.net());
    let steps = train_idx.len().div_ceil(config.batch_size).max(1);
    let mut epoch_train_mse = Vec::with_capacity(config.epochs);
    let mut rows = vec![0usize; config.batch_size];

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            for slot in rows.iter_mut() {
                *slot = train_idx[r.random_range(0..train_idx.len())];
            }
            let bs = gather(&rows, &states);
            let ba = gather(&rows, &actions);
            let cache = policy.net().forward_cached(&bs)?;
            let out = cache.output();
            let b = (rows.len() * ad) as f64;
            let mut upstream = Mat::zeros(rows.len(), 2 * ad);
            let mut loss = 0.0;
            for i in 0..rows.len() {
                let o = out.row(i);
                let t = ba.row(i);
                let up = upstream.row_mut(i);
                for j in 0..ad {
                    let th = o[j].tanh();
                    let pred = policy.act_mid()[j] + policy.act_half()[j] * th;
                    let e = pred - t[j];
                    loss += e * e;
                    up[j] = 2.0 * e * policy.act_half()[j] * (1.0 - th * th) / b;
                }
            }
            loss /= b;
            if !loss.is_finite() {
                return Err(CbopError::Divergence {
                    context: format!("behavior cloning epoch {epoch} step {step}: non-finite MSE"),
                });
            }
            epoch_loss += loss;
            let mut grads = Gradients::zeros_like(policy.net());
            policy.net().backward(&cache, &upstream, &mut grads)?;
            adam.apply(policy.net_mut(), &grads, config.lr)?;
        }
        epoch_train_mse.push(epoch_loss / steps as f64);
    }

    let final_val_mse = bc_mse(policy, &val_s, &val_a)?;
    Ok(BcReport {
        initial_val_mse,
        final_val_mse,
        epoch_train_mse,
    })
}

/// Where FQE bootstrap actions come from.
pub enum FqeTargets<'a> {
    /// the recorded next action in the dataset (behavior-policy value);
    /// non-terminal transitions at an episode's truncation boundary have no
    /// recorded next action and are excluded from the regression
    BehaviorActions,
    /// the deterministic head of a trained policy
    Policy(&'a PolicyNet),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FqeConfig {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for FqeConfig {
    fn default() -> Self {
        FqeConfig {
            rounds: 20,
            steps_per_round: 60,
            batch_size: 128,
            lr: 1e-3,
            gamma: 0.99,
            seed: 0,
        }
    }
}

/// Loss above which a round is declared divergent and the run aborts.
pub const FQE_DIVERGENCE_LIMIT: f64 = 1e8;

/// Iterated regression toward y = r + γ·Q_target(s′, a′): each round
/// rebuilds the per-head targets with the frozen target networks, fits the
/// online heads by MSE, then hard-syncs the targets.
pub fn fqe_pretrain(
    critic: &mut QEnsemble,
    targets: FqeTargets<'_>,
    dataset: &Dataset,
    config: &FqeConfig,
    reward_scale: f64,
) -> Result<Vec<f64>> {
    if config.rounds == 0 {
        return Err(CbopError::InvalidConfig("FQE needs at least one round".into()));
    }
    let n = dataset.len();
    let (od, ad) = (dataset.obs_dim, dataset.act_dim);

    // usable rows: terminal transitions need no next action; others need one
    let usable: Vec<usize> = (0..n)
        .filter(|&i| {
            let tr = dataset.transition(i);
            if tr.done {
                return true;
            }
            match targets {
                FqeTargets::BehaviorActions => {
                    i + 1 < n && !dataset.transition(i + 1).initial
                }
                FqeTargets::Policy(_) => true,
            }
        })
        .collect();
    if usable.is_empty() {
        return Err(CbopError::InsufficientData(
            "no FQE-usable transitions (every row is a truncation boundary)".into(),
        ));
    }

    let nu = usable.len();
    let mut sa = Mat::zeros(nu, od + ad);
    let mut next_s = Mat::zeros(nu, od);
    let mut rewards = vec![0.0; nu];
    let mut dones = vec![false; nu];
    for (row, &i) in usable.iter().enumerate() {
        let tr = dataset.transition(i);
        let dst = sa.row_mut(row);
        for (j, &v) in tr.s.iter().enumerate() {
            dst[j] = v as f64;
        }
        for (j, &v) in tr.a.iter().enumerate() {
            dst[od + j] = v as f64;
        }
        for (j, &v) in tr.s2.iter().enumerate() {
            next_s.row_mut(row)[j] = v as f64;
        }
        rewards[row] = tr.r as f64 * reward_scale;
        dones[row] = tr.done;
    }

    // bootstrap actions at s′
    let next_a = match targets {
        FqeTargets::Policy(p) => p.act_mean(&next_s)?,
        FqeTargets::BehaviorActions => {
            let mut a = Mat::zeros(nu, ad);
            for (row, &i) in usable.iter().enumerate() {
                if dones[row] {
                    continue; // unused: terminal rows bootstrap zero
                }
                let next = dataset.transition(i + 1);
                for (j, &v) in next.a.iter().enumerate() {
                    a.row_mut(row)[j] = v as f64;
                }
            }
            a
        }
    };
    let next_sa = Mat::hcat(&next_s, &next_a);

    let mut adams: Vec<AdamState> = critic.heads().iter().map(AdamState::new).collect();
    let mut r = rng::stream(config.seed, &[rng::tags::FQE]);
    let mut round_losses = Vec::with_capacity(config.rounds);
    let mut rows = vec![0usize; config.batch_size];

    for round in 0..config.rounds {
        // frozen per-head targets for this round
        let q_next = critic.q_values_all(&next_sa, Which::Target)?;
        let mut y = Mat::zeros(nu, critic.m);
        for i in 0..nu {
            for m in 0..critic.m {
                let boot = if dones[i] { 0.0 } else { config.gamma * q_next.row(i)[m] };
                y.row_mut(i)[m] = rewards[i] + boot;
            }
        }

        let mut round_loss = 0.0;
        for _ in 0..config.steps_per_round {
            for slot in rows.iter_mut() {
                *slot = r.random_range(0..nu);
            }
            let mut bin = Mat::zeros(rows.len(), od + ad);
            for (b, &row) in rows.iter().enumerate() {
                bin.row_mut(b).copy_from_slice(sa.row(row));
            }
            let mut step_loss = 0.0;
            for m in 0..critic.m {
                let cache = critic.heads()[m].forward_cached(&bin)?;
                let out = cache.output();
                let bsz = rows.len() as f64;
                let mut upstream = Mat::zeros(rows.len(), 1);
                let mut loss = 0.0;
                for (b, &row) in rows.iter().enumerate() {
                    let e = out.row(b)[0] - y.row(row)[m];
                    loss += e * e;
                    upstream.row_mut(b)[0] = 2.0 * e / bsz;
                }
                loss /= bsz;
                step_loss += loss;
                let mut grads = Gradients::zeros_like(&critic.heads()[m]);
                critic.heads()[m].backward(&cache, &upstream, &mut grads)?;
                adams[m].apply(critic.head_mut(m), &grads, config.lr)?;
            }
            step_loss /= critic.m as f64;
            if !step_loss.is_finite() || step_loss > FQE_DIVERGENCE_LIMIT {
                return Err(CbopError::Divergence {
                    context: format!("FQE round {round}: loss {step_loss}"),
                });
            }
            round_loss += step_loss;
        }
        round_losses.push(round_loss / config.steps_per_round as f64);
        critic.hard_sync();
    }
    Ok(round_losses)
}

/// Spearman rank correlation from two rank vectors (1-based ranks, equal
/// length, no ties). Arranged as an integer ratio so textbook fixtures come
/// out exact in floating point.
pub fn spearman_from_ranks(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CbopError::InsufficientData(format!(
            "spearman needs two equal rankings of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as i64;
    let d2: i64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            d * d
        })
        .sum();
    let denom = n * (n * n - 1);
    Ok((denom - 6 * d2) as f64 / denom as f64)
}

#[derive(Debug, Clone)]
pub struct RankEntry {
    /// position of the policy in the input list
    pub index: usize,
    /// mean over dataset initial states of the mean-head Q(s₀, π(s₀))
    pub score: f64,
    /// 1 = highest score
    pub rank: usize,
}

/// Rank trained policies by offline FQE value. Each policy gets a fresh
/// evaluator ensemble trained against its own deterministic head; scores
/// average the evaluator over the dataset's initial states. Returns the
/// entries in input order plus Spearman ρ against a reference ranking when
/// one is supplied.
pub fn fqe_rank_hyperparams(
    policies: &[&PolicyNet],
    dataset: &Dataset,
    fqe: &FqeConfig,
    evaluator_hidden: &[usize],
    evaluator_heads: usize,
    reward_scale: f64,
    reference_ranking: Option<&[usize]>,
) -> Result<(Vec<RankEntry>, Option<f64>)> {
    if policies.len() < 2 {
        return Err(CbopError::InsufficientData(
            "ranking needs at least two policies".into(),
        ));
    }
    let initial = dataset.initial_state_indices();
    if initial.len() < 2 {
        return Err(CbopError::InsufficientData(format!(
            "ranking needs at least two initial states, dataset has {}",
            initial.len()
        )));
    }
    let (od, ad) = (dataset.obs_dim, dataset.act_dim);
    let mut s0 = Mat::zeros(initial.len(), od);
    for (row, &i) in initial.iter().enumerate() {
        let tr = dataset.transition(i);
        for (j, &v) in tr.s.iter().enumerate() {
            s0.row_mut(row)[j] = v as f64;
        }
    }

    let mut scores = Vec::with_capacity(policies.len());
    for (p, policy) in policies.iter().enumerate() {
        let mut evaluator = QEnsemble::new(
            evaluator_heads,
            od,
            ad,
            evaluator_hidden,
            crate::funcapprox::Hidden::Relu,
            rng::derive_path(fqe.seed, &[rng::tags::FQE, p as u64]),
        )?;
        fqe_pretrain(
            &mut evaluator,
            FqeTargets::Policy(policy),
            dataset,
            fqe,
            reward_scale,
        )?;
        let a0 = policy.act_mean(&s0)?;
        let sa0 = Mat::hcat(&s0, &a0);
        let q = evaluator.q_values_all(&sa0, Which::Online)?;
        let mut total = 0.0;
        for i in 0..q.rows() {
            total += q.row(i).iter().sum::<f64>() / evaluator.m as f64;
        }
        scores.push(total / q.rows() as f64 / reward_scale);
    }

    // ranks: 1 = best score; ties broken by input order for determinism
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y]
            .partial_cmp(&scores[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    let mut entries: Vec<RankEntry> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| RankEntry {
            index,
            score,
            rank: 0,
        })
        .collect();
    for (rank0, &idx) in order.iter().enumerate() {
        entries[idx].rank = rank0 + 1;
    }

    let rho = match reference_ranking {
        Some(reference) => {
            let ranks: Vec<usize> = entries.iter().map(|e| e.rank).collect();
            Some(spearman_from_ranks(&ranks, reference)?)
        }
        None => None,
    };
    Ok((entries, rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::BehaviorTag;
    use crate::funcapprox::Hidden;

    fn loop_dataset(n: usize, reward: f32) -> Dataset {
        Dataset::from_columns(
            "loop".into(),
            1,
            1,
            BehaviorTag::Random,
            0,
            vec![0.0; n],
            vec![0.0; n],
            vec![reward; n],
            vec![0.0; n],
            vec![false; n],
            (0..n).map(|i| i == 0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn bc_learns_a_linear_behavior_policy() {
        use rand::Rng;
        let mut r = rng::stream(3, &[1]);
        let n = 2000;
        let mut s = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = r.random_range(-1.0..1.0);
            s.push(x as f32);
            a.push((0.4 * x) as f32);
        }
        let ds = Dataset::from_columns(
            "lin".into(),
            1,
            1,
            BehaviorTag::Expert,
            3,
            s,
            a,
            vec![0.0; n],
            vec![0.0; n],
            vec![false; n],
            (0..n).map(|i| i == 0).collect(),
        )
        .unwrap();
        let mut policy = PolicyNet::new(1, 1, &[32], &[-1.0], &[1.0], 0.05, 0).unwrap();
        let report = bc_pretrain(
            &mut policy,
            &ds,
            &BcConfig {
                epochs: 60,
                batch_size: 128,
                lr: 1e-3,
                val_fraction: 0.1,
                seed: 0,
            },
        )
        .unwrap();
        assert!(report.final_val_mse < 1e-3, "val MSE {}", report.final_val_mse);
        assert!(report.final_val_mse < report.initial_val_mse);
    }

    #[test]
    fn bc_zero_epochs_or_zero_lr_change_nothing() {
        let ds = loop_dataset(32, 1.0);
        let mut p1 = PolicyNet::new(1, 1, &[8], &[-1.0], &[1.0], 0.05, 0).unwrap();
        let before = p1.net().params_flat();
        bc_pretrain(
            &mut p1,
            &ds,
            &BcConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(p1.net().params_flat(), before);

        bc_pretrain(
            &mut p1,
            &ds,
            &BcConfig {
                epochs: 5,
                lr: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(p1.net().params_flat(), before);
    }

    #[test]
    fn fqe_fixed_point_of_the_self_loop() {
        let ds = loop_dataset(64, 1.0);
        let mut critic = QEnsemble::new(2, 1, 1, &[16], Hidden::Tanh, 1).unwrap();
        fqe_pretrain(
            &mut critic,
            FqeTargets::BehaviorActions,
            &ds,
            &FqeConfig {
                rounds: 40,
                steps_per_round: 30,
                batch_size: 32,
                lr: 3e-3,
                gamma: 0.5,
                seed: 0,
            },
            1.0,
        )
        .unwrap();
        let mut sa = Mat::zeros(1, 2);
        sa.row_mut(0).copy_from_slice(&[0.0, 0.0]);
        for m in 0..critic.m {
            let q = critic.q_values(m, &sa, Which::Online).unwrap()[0];
            assert!((q - 2.0).abs() < 1e-3, "head {m}: {q} != 2");
        }
    }

    #[test]
    fn fqe_zero_gamma_recovers_the_reward() {
        let ds = loop_dataset(64, -1.5);
        let mut critic = QEnsemble::new(1, 1, 1, &[16], Hidden::Tanh, 2).unwrap();
        fqe_pretrain(
            &mut critic,
            FqeTargets::BehaviorActions,
            &ds,
            &FqeConfig {
                rounds: 10,
                steps_per_round: 40,
                batch_size: 32,
                lr: 3e-3,
                gamma: 0.0,
                seed: 0,
            },
            1.0,
        )
        .unwrap();
        let mut sa = Mat::zeros(1, 2);
        sa.row_mut(0).copy_from_slice(&[0.0, 0.0]);
        let q = critic.q_values(0, &sa, Which::Online).unwrap()[0];
        assert!((q - -1.5).abs() < 1e-3, "{q}");
    }

    #[test]
    fn fqe_two_state_chain_matches_the_linear_solve() {
        // deterministic cycle 0 -> 1 -> 0 with rewards +1 at state 0, -1 at 1
        let n = 200;
        let mut s = Vec::new();
        let mut rew = Vec::new();
        let mut s2 = Vec::new();
        for i in 0..n {
            let at_zero = i % 2 == 0;
            s.push(if at_zero { 0.0 } else { 1.0 });
            rew.push(if at_zero { 1.0 } else { -1.0 });
            s2.push(if at_zero { 1.0 } else { 0.0 });
        }
        let ds = Dataset::from_columns(
            "chain".into(),
            1,
            1,
            BehaviorTag::Random,
            0,
            s,
            vec![0.0; n],
            rew,
            s2,
            vec![false; n],
            (0..n).map(|i| i == 0).collect(),
        )
        .unwrap();

        let gamma = 0.5;
        // hand-solved Bellman system: q0 = 1 + γ q1, q1 = -1 + γ q0
        let q0 = (1.0 - gamma) / (1.0 - gamma * gamma);
        let q1 = -1.0 + gamma * q0;

        let mut critic = QEnsemble::new(2, 1, 1, &[24], Hidden::Tanh, 5).unwrap();
        fqe_pretrain(
            &mut critic,
            FqeTargets::BehaviorActions,
            &ds,
            &FqeConfig {
                rounds: 50,
                steps_per_round: 40,
                batch_size: 64,
                lr: 3e-3,
                gamma,
                seed: 1,
            },
            1.0,
        )
        .unwrap();
        let mut sa = Mat::zeros(2, 2);
        sa.row_mut(0).copy_from_slice(&[0.0, 0.0]);
        sa.row_mut(1).copy_from_slice(&[1.0, 0.0]);
        for m in 0..critic.m {
            let q = critic.q_values(m, &sa, Which::Online).unwrap();
            assert!((q[0] - q0).abs() < 1e-3, "head {m} q0: {} vs {q0}", q[0]);
            assert!((q[1] - q1).abs() < 1e-3, "head {m} q1: {} vs {q1}", q[1]);
        }
    }

    #[test]
    fn fqe_diverges_loudly_with_an_absurd_lr() {
        let ds = loop_dataset(64, 1.0);
        let mut critic = QEnsemble::new(1, 1, 1, &[16], Hidden::Relu, 3).unwrap();
        let err = fqe_pretrain(
            &mut critic,
            FqeTargets::BehaviorActions,
            &ds,
            &FqeConfig {
                rounds: 200,
                steps_per_round: 50,
                batch_size: 32,
                lr: 1e6,
                gamma: 0.99,
                seed: 0,
            },
            1.0,
        );
        assert!(matches!(err, Err(CbopError::Divergence { .. })));
    }

    #[test]
    fn spearman_textbook_values() {
        assert_eq!(spearman_from_ranks(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(spearman_from_ranks(&[1, 2, 3, 4], &[4, 3, 2, 1]).unwrap(), -1.0);
        assert_eq!(spearman_from_ranks(&[2, 1, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.8);
        assert!(spearman_from_ranks(&[1], &[1]).is_err());
    }
}
