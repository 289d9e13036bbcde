use std::path::PathBuf;

use cbop_core::envdata::{generate_dataset, save_dataset, BehaviorTag, EnvSpec, GenConfig};
use cbop_core::Result;

use crate::config::{guard_output, resolve_seed};

#[derive(clap::Args)]
pub struct Args {
    /// Environment id: point_mass_2d, pendulum_swing, or hopper_toy
    #[arg(long)]
    env: String,

    /// Behavior policy tag: random, medium, medium_replay, expert, or mixed
    #[arg(long)]
    tag: String,

    /// Number of transitions to record
    #[arg(long)]
    size: usize,

    /// Scales the exploration noise of the scripted behavior policy
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,

    #[arg(long)]
    seed: Option<u64>,

    /// Output dataset path
    #[arg(long)]
    out: PathBuf,

    #[arg(long)]
    overwrite: bool,
}

pub fn run(args: Args) -> Result<()> {
    let env = EnvSpec::by_id(&args.env)?;
    let tag = BehaviorTag::parse(&args.tag)?;
    let seed = resolve_seed(args.seed, None, 0)?;
    guard_output(&args.out, args.overwrite)?;

    let dataset = generate_dataset(&GenConfig {
        env_id: env.id.to_string(),
        tag,
        size: args.size,
        noise_scale: args.noise_scale,
        seed,
    })?;
    save_dataset(&dataset, &args.out)?;

    println!(
        "wrote {} transitions ({} episodes, {} behavior) for {} to {}",
        dataset.len(),
        dataset.episodes().len(),
        tag.as_str(),
        env.id,
        args.out.display()
    );
    Ok(())
}
