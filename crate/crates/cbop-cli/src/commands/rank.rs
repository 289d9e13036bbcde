use std::fmt::Write as _;
use std::path::PathBuf;

use cbop_core::agent::{fqe_rank_hyperparams, load_checkpoint, FqeConfig, PolicyNet};
use cbop_core::envdata::load_dataset;
use cbop_core::{CbopError, Result};

use crate::config::{guard_output, load_run_config, resolve_seed, write_text};

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoints to rank (at least two, same environment)
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,

    /// Dataset the FQE evaluators are fitted on
    #[arg(long)]
    dataset: PathBuf,

    /// Expected ranking as comma-separated ranks in input order, e.g.
    /// "2,1,3" means the second checkpoint is best; reports Spearman rho
    #[arg(long)]
    reference: Option<String>,

    /// Optional JSON run config (fqe section)
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Optional CSV output
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    overwrite: bool,
}

fn parse_reference(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| CbopError::InvalidConfig(format!("bad reference rank {part:?}")))
        })
        .collect()
}

pub fn run(args: Args) -> Result<()> {
    let run = load_run_config(args.config.as_deref())?;
    if args.checkpoints.len() < 2 {
        return Err(CbopError::InvalidConfig(
            "ranking needs at least two --checkpoint arguments".into(),
        ));
    }
    if let Some(out) = &args.out {
        guard_output(out, args.overwrite)?;
    }

    let mut agents = Vec::with_capacity(args.checkpoints.len());
    for path in &args.checkpoints {
        agents.push(load_checkpoint(path)?);
    }
    let (first_agent, first_cfg) = &agents[0];
    for ((agent, _), path) in agents.iter().zip(&args.checkpoints) {
        if agent.env.id != first_agent.env.id {
            return Err(CbopError::InvalidConfig(format!(
                "checkpoint {} is for {}, expected {}",
                path.display(),
                agent.env.id,
                first_agent.env.id
            )));
        }
    }

    let dataset = load_dataset(&args.dataset)?;
    if dataset.env_id != first_agent.env.id {
        return Err(CbopError::InvalidConfig(format!(
            "dataset {} was recorded on {}, checkpoints expect {}",
            args.dataset.display(),
            dataset.env_id,
            first_agent.env.id
        )));
    }

    let reference = args.reference.as_deref().map(parse_reference).transpose()?;

    let seed = resolve_seed(args.seed, run.seed, first_cfg.seed)?;
    let mut fqe = run.fqe.unwrap_or_else(|| {
        let mut f = FqeConfig::default();
        f.gamma = first_cfg.gamma;
        f
    });
    fqe.seed = seed;

    // All evaluators share the first checkpoint's critic architecture and
    // reward scale so the scores live on one comparable axis.
    let policies: Vec<&PolicyNet> = agents.iter().map(|(a, _)| &a.policy).collect();
    let (entries, rho) = fqe_rank_hyperparams(
        &policies,
        &dataset,
        &fqe,
        &first_cfg.q_hidden,
        first_cfg.m,
        first_agent.reward_scale,
        reference.as_deref(),
    )?;

    let mut csv = String::from("index,checkpoint,score,rank\n");
    for entry in &entries {
        writeln!(
            csv,
            "{},{},{},{}",
            entry.index,
            args.checkpoints[entry.index].display(),
            entry.score,
            entry.rank
        )
        .unwrap();
        println!(
            "rank {:>2}: {} (score {:+.6})",
            entry.rank,
            args.checkpoints[entry.index].display(),
            entry.score
        );
    }
    if let Some(rho) = rho {
        println!("spearman_rho={rho}");
        writeln!(csv, "# spearman_rho,{rho}").unwrap();
    }
    if let Some(out) = &args.out {
        write_text(out, &csv)?;
    }
    Ok(())
}
