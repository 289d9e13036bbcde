use std::path::PathBuf;

use cbop_core::agent::{bc_pretrain, fqe_pretrain, save_checkpoint, AgentState, FqeTargets};
use cbop_core::dynamics::train_dynamics;
use cbop_core::envdata::{load_dataset, EnvSpec};
use cbop_core::{CbopError, Result};

use crate::config::{guard_output, load_run_config, resolve_seed};

#[derive(clap::Args)]
pub struct Args {
    /// Input dataset (from gen-data)
    #[arg(long)]
    dataset: PathBuf,

    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,

    /// Optional JSON run config (train/dynamics/bc/fqe sections)
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Assert that the dataset was recorded on this environment
    #[arg(long)]
    env: Option<String>,

    #[arg(long)]
    overwrite: bool,
}

pub fn run(args: Args) -> Result<()> {
    let run = load_run_config(args.config.as_deref())?;
    guard_output(&args.out, args.overwrite)?;

    let dataset = load_dataset(&args.dataset)?;
    let env = EnvSpec::by_id(&dataset.env_id)?;
    if let Some(want) = args.env.as_deref().or(run.env_id.as_deref()) {
        if want != env.id {
            return Err(CbopError::InvalidConfig(format!(
                "dataset {} was recorded on {}, not {want}",
                args.dataset.display(),
                env.id
            )));
        }
    }

    let seed = resolve_seed(args.seed, run.seed, 0)?;

    // One experiment seed fans out to every stage; the stages draw from
    // disjoint tagged streams, so sharing the root is safe.
    let mut dynamics_cfg = run.dynamics.unwrap_or_default();
    dynamics_cfg.seed = seed;
    let mut train_cfg = run.train.unwrap_or_default();
    train_cfg.seed = seed;
    train_cfg.validate()?;
    let mut bc_cfg = run.bc.unwrap_or_default();
    bc_cfg.seed = seed;
    let mut fqe_cfg = run.fqe.unwrap_or_else(|| {
        let mut f = cbop_core::agent::FqeConfig::default();
        f.gamma = train_cfg.gamma;
        f
    });
    fqe_cfg.seed = seed;

    println!(
        "training dynamics: {} members ({} elite), {} epochs",
        dynamics_cfg.k_total, dynamics_cfg.k_elite, dynamics_cfg.epochs
    );
    let dynamics = train_dynamics(&dataset, &dynamics_cfg)?;
    let nll = dynamics.validation_nll.clone();
    println!(
        "  elites {:?}, held-out NLL {:?}",
        dynamics.elite_indices(),
        nll.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
    );

    let mut agent = AgentState::new(&env, &dataset, dynamics, &train_cfg)?;

    let report = bc_pretrain(&mut agent.policy, &dataset, &bc_cfg)?;
    println!(
        "behavior cloning: val MSE {:.6} -> {:.6} over {} epochs",
        report.initial_val_mse, report.final_val_mse, bc_cfg.epochs
    );

    let losses = fqe_pretrain(
        &mut agent.critic,
        FqeTargets::BehaviorActions,
        &dataset,
        &fqe_cfg,
        agent.reward_scale,
    )?;
    let last = losses.last().copied().unwrap_or(f64::NAN);
    println!("fqe warm start: {} rounds, final loss {last:.6}", fqe_cfg.rounds);

    save_checkpoint(&agent, &train_cfg, &args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}
