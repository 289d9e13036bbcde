use std::fmt::Write as _;
use std::path::PathBuf;

use cbop_core::agent::{evaluate_policy, load_checkpoint};
use cbop_core::Result;

use crate::config::{guard_output, resolve_seed, write_text};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long, default_value_t = 20)]
    episodes: usize,

    #[arg(long)]
    seed: Option<u64>,

    /// Optional per-episode CSV output
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    overwrite: bool,
}

pub fn run(args: Args) -> Result<()> {
    let (agent, cfg) = load_checkpoint(&args.checkpoint)?;
    let seed = resolve_seed(args.seed, None, cfg.seed)?;

    let result = evaluate_policy(&agent.policy, &agent.env, args.episodes, seed)?;

    if let Some(out) = &args.out {
        guard_output(out, args.overwrite)?;
        let mut csv = String::from("episode,return,normalized_score\n");
        for (e, &ret) in result.returns.iter().enumerate() {
            writeln!(csv, "{e},{ret},{}", agent.env.normalized_score(ret)).unwrap();
        }
        write_text(out, &csv)?;
    }

    println!(
        "env={} episodes={} mean_return={:.6} normalized_score={:.3}",
        agent.env.id, args.episodes, result.mean_return, result.normalized_score
    );
    Ok(())
}
