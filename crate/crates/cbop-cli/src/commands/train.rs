use std::io::Write as _;
use std::path::PathBuf;

use cbop_core::agent::{
    cbop_train_epoch, load_checkpoint, save_checkpoint, PolicyObjective, METRICS_CSV_HEADER,
};
use cbop_core::bayesmve::{EstimatorKind, SampleMode};
use cbop_core::dynamics::PredictMode;
use cbop_core::envdata::load_dataset;
use cbop_core::{CbopError, Result};

use crate::config::{guard_output, load_run_config, parse_variant, resolve_seed};

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint to resume from (typically the pretrain output)
    #[arg(long)]
    checkpoint: PathBuf,

    /// Dataset to train on; must match the checkpoint's environment
    #[arg(long)]
    dataset: PathBuf,

    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,

    /// Per-epoch metrics CSV path
    #[arg(long)]
    metrics: PathBuf,

    /// Optional JSON run config; its train section must agree with the
    /// checkpoint on architecture (heads, hidden sizes, gamma, temperature)
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    steps_per_epoch: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    /// Rollout horizon H (targets fuse horizons 0..=H)
    #[arg(long)]
    horizon: Option<usize>,

    #[arg(long)]
    lr_actor: Option<f64>,

    #[arg(long)]
    lr_critic: Option<f64>,

    #[arg(long)]
    target_update_rate: Option<f64>,

    /// Critic diversity penalty weight
    #[arg(long)]
    eta: Option<f64>,

    /// Target estimator: lcb, map, quantile, fixed_lambda, or fixed_uniform
    #[arg(long)]
    estimator: Option<String>,

    /// LCB coefficient (only used by the lcb estimator)
    #[arg(long)]
    psi: Option<f64>,

    /// TD(lambda) weight decay (only used by fixed_lambda)
    #[arg(long)]
    lambda: Option<f64>,

    /// Pooled-sample quantile level (only used by quantile)
    #[arg(long)]
    alpha: Option<f64>,

    /// single_pass or independent_per_h
    #[arg(long)]
    rollout_mode: Option<String>,

    /// Particle propagation through the dynamics heads: sample or mean
    #[arg(long)]
    propagation: Option<String>,

    /// mean_q or min_q
    #[arg(long)]
    policy_objective: Option<String>,

    #[arg(long)]
    eval_episodes: Option<usize>,

    #[arg(long)]
    overwrite: bool,
}

pub fn run(args: Args) -> Result<()> {
    let run = load_run_config(args.config.as_deref())?;
    guard_output(&args.out, args.overwrite)?;
    guard_output(&args.metrics, args.overwrite)?;

    let (mut agent, ckpt_cfg) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    if dataset.obs_dim != agent.env.obs_dim || dataset.act_dim != agent.env.act_dim {
        return Err(CbopError::shape(
            "dataset dims vs checkpoint environment",
            agent.env.obs_dim + agent.env.act_dim,
            dataset.obs_dim + dataset.act_dim,
        ));
    }
    if dataset.env_id != agent.env.id {
        return Err(CbopError::InvalidConfig(format!(
            "dataset {} was recorded on {}, checkpoint expects {}",
            args.dataset.display(),
            dataset.env_id,
            agent.env.id
        )));
    }

    let mut cfg = run.train.clone().unwrap_or_else(|| ckpt_cfg.clone());

    // The checkpoint fixes everything that is baked into the stored
    // parameters. A config that silently disagreed would load garbage, so
    // these fields must match exactly.
    let structural: [(&str, bool); 6] = [
        ("m", cfg.m == ckpt_cfg.m),
        ("q_hidden", cfg.q_hidden == ckpt_cfg.q_hidden),
        ("policy_hidden", cfg.policy_hidden == ckpt_cfg.policy_hidden),
        ("gamma", cfg.gamma == ckpt_cfg.gamma),
        (
            "entropy_temperature",
            cfg.entropy_temperature == ckpt_cfg.entropy_temperature,
        ),
        (
            "auto_reward_scale",
            cfg.auto_reward_scale == ckpt_cfg.auto_reward_scale,
        ),
    ];
    for (name, matches) in structural {
        if !matches {
            return Err(CbopError::InvalidConfig(format!(
                "config field {name} is fixed by the checkpoint and cannot be overridden"
            )));
        }
    }

    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.steps_per_epoch {
        cfg.steps_per_epoch = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = args.lr_actor {
        cfg.lr_actor = v;
    }
    if let Some(v) = args.lr_critic {
        cfg.lr_critic = v;
    }
    if let Some(v) = args.target_update_rate {
        cfg.target_update_rate = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(ref v) = args.estimator {
        cfg.estimator.kind = parse_variant::<EstimatorKind>("estimator", v)?;
    }
    if let Some(v) = args.psi {
        cfg.estimator.psi = v;
    }
    if let Some(v) = args.lambda {
        cfg.estimator.lambda = v;
    }
    if let Some(v) = args.alpha {
        cfg.estimator.alpha = v;
    }
    if let Some(ref v) = args.rollout_mode {
        cfg.rollout_mode = parse_variant::<SampleMode>("rollout mode", v)?;
    }
    if let Some(ref v) = args.propagation {
        cfg.propagation = parse_variant::<PredictMode>("propagation mode", v)?;
    }
    if let Some(ref v) = args.policy_objective {
        cfg.policy_objective = parse_variant::<PolicyObjective>("policy objective", v)?;
    }
    if let Some(v) = args.eval_episodes {
        cfg.eval_episodes = v;
    }
    cfg.seed = resolve_seed(args.seed, run.seed, ckpt_cfg.seed)?;
    cfg.validate()?;

    let mut metrics_file = std::fs::File::create(&args.metrics)
        .map_err(|e| CbopError::io(args.metrics.display(), e))?;
    writeln!(metrics_file, "{METRICS_CSV_HEADER}")
        .map_err(|e| CbopError::io(args.metrics.display(), e))?;

    for _ in 0..cfg.epochs {
        // The metrics file keeps every epoch written so far even when a
        // later epoch aborts with divergence.
        let metrics = cbop_train_epoch(&mut agent, &dataset, &cfg)?;
        writeln!(metrics_file, "{}", metrics.csv_row())
            .map_err(|e| CbopError::io(args.metrics.display(), e))?;
        metrics_file
            .flush()
            .map_err(|e| CbopError::io(args.metrics.display(), e))?;
        println!(
            "epoch {:>4}: critic {:.5} actor {:+.5} target {:+.4} E[h] {:.3} eval {:+.3} ({:.1})",
            metrics.epoch,
            metrics.critic_loss,
            metrics.actor_loss,
            metrics.mean_target,
            metrics.mean_expected_horizon,
            metrics.eval_return,
            metrics.normalized_score
        );
    }

    save_checkpoint(&agent, &cfg, &args.out)?;
    println!(
        "trained {} epochs (total {}), checkpoint written to {}",
        cfg.epochs,
        agent.epoch(),
        args.out.display()
    );
    Ok(())
}
