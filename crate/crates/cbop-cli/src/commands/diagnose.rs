//! Post-hoc diagnostics for a trained checkpoint. Everything is written as
//! plain CSV so plotting stays out of this crate.
//!
//! * `conservatism.csv` — critic value vs Monte-Carlo return per probe state
//! * `expected_horizon.csv` — posterior E[h], mean, std per sampled transition
//! * `horizon_weights.csv` — mean posterior weight w_h per horizon
//! * `variance_ratio_hist.csv` — histogram of A/(A+B) per horizon (50 bins)
//! * `return_hist.csv` — histogram of the h-step return samples per horizon
//!
//! Returns and posterior moments are reported in raw reward units (the
//! internal reward scaling is divided back out).

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::Rng;

use cbop_core::agent::{conservatism_gap, load_checkpoint};
use cbop_core::bayesmve::{likelihood_params, posterior, sample_returns, variance_ratio, RolloutSpec, Sarsd};
use cbop_core::envdata::load_dataset;
use cbop_core::rng::{self, tags};
use cbop_core::{CbopError, Result};

use crate::config::{guard_output, resolve_seed, write_text};

const HIST_BINS: usize = 50;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long)]
    dataset: PathBuf,

    /// Directory that receives the CSV files (created if missing)
    #[arg(long)]
    out_dir: PathBuf,

    /// Number of dataset transitions to roll out for the horizon statistics
    #[arg(long, default_value_t = 64)]
    transitions: usize,

    /// Number of probe states for the conservatism gap
    #[arg(long, default_value_t = 32)]
    gap_states: usize,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    overwrite: bool,
}

struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<usize>,
}

fn histogram(values: &[f64], lo: f64, hi: f64) -> Histogram {
    let mut counts = vec![0usize; HIST_BINS];
    let span = hi - lo;
    for &v in values {
        let bin = if span > 0.0 {
            (((v - lo) / span * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Histogram { lo, hi, counts }
}

fn hist_rows(out: &mut String, h: usize, hist: &Histogram) {
    let width = (hist.hi - hist.lo) / HIST_BINS as f64;
    for (bin, &count) in hist.counts.iter().enumerate() {
        let lo = hist.lo + bin as f64 * width;
        let hi = if bin + 1 == HIST_BINS { hist.hi } else { lo + width };
        writeln!(out, "{h},{bin},{lo},{hi},{count}").unwrap();
    }
}

pub fn run(args: Args) -> Result<()> {
    if args.transitions == 0 {
        return Err(CbopError::InvalidConfig(
            "--transitions must be at least 1".into(),
        ));
    }
    let (agent, cfg) = load_checkpoint(&args.checkpoint)?;
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
    let seed = resolve_seed(args.seed, None, cfg.seed)?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CbopError::io(args.out_dir.display(), e))?;
    let files: Vec<PathBuf> = [
        "conservatism.csv",
        "expected_horizon.csv",
        "horizon_weights.csv",
        "variance_ratio_hist.csv",
        "return_hist.csv",
    ]
    .iter()
    .map(|name| args.out_dir.join(name))
    .collect();
    for path in &files {
        guard_output(path, args.overwrite)?;
    }

    // -- conservatism gap ---------------------------------------------------
    let gap = conservatism_gap(
        &agent.policy,
        &agent.critic,
        &agent.env,
        &dataset,
        args.gap_states,
        cfg.gamma,
        agent.reward_scale,
        seed,
    )?;
    let mut csv = String::from("index,critic_value,mc_return,gap\n");
    for row in &gap.rows {
        writeln!(
            csv,
            "{},{},{},{}",
            row.index,
            row.critic_value,
            row.mc_return,
            row.critic_value - row.mc_return
        )
        .unwrap();
    }
    write_text(&files[0], &csv)?;

    // -- rollout statistics over sampled dataset transitions ----------------
    let env = agent.env.clone();
    let terminal = |s: &[f64]| env.is_terminal(s);
    let spec = RolloutSpec {
        horizon: cfg.horizon,
        discount: cfg.gamma,
        mode: cfg.rollout_mode,
        propagation: cfg.propagation,
        reward_scale: agent.reward_scale,
        terminal: Some(&terminal),
    };

    let h_levels = cfg.horizon + 1;
    let mut pick = rng::stream(seed, &[tags::DIAG, 1]);
    let mut weight_sums = vec![0.0f64; h_levels];
    let mut ratios_by_h: Vec<Vec<f64>> = vec![Vec::new(); h_levels];
    let mut returns_by_h: Vec<Vec<f64>> = vec![Vec::new(); h_levels];
    let mut horizon_csv = String::from("index,expected_horizon,posterior_mean,posterior_std\n");

    for _ in 0..args.transitions {
        let idx = pick.random_range(0..dataset.len());
        let tr = dataset.transition(idx);
        let s: Vec<f64> = tr.s.iter().map(|&v| v as f64).collect();
        let a: Vec<f64> = tr.a.iter().map(|&v| v as f64).collect();
        let s2: Vec<f64> = tr.s2.iter().map(|&v| v as f64).collect();
        let sarsd = Sarsd {
            s: &s,
            a: &a,
            r: tr.r as f64,
            s2: &s2,
            done: tr.done,
        };
        let grid = sample_returns(
            sarsd,
            &agent.policy,
            agent.dynamics(),
            &agent.critic,
            &spec,
            rng::derive_path(seed, &[tags::DIAG, 2, idx as u64]),
        )?;
        let params = likelihood_params(&grid);
        let post = posterior(&params);
        for (h, &w) in post.weights.iter().enumerate() {
            weight_sums[h] += w;
        }
        for (h, ratio) in variance_ratio(&params).iter().enumerate() {
            ratios_by_h[h].push(*ratio);
        }
        for h in 0..h_levels {
            for &v in grid.horizon_samples(h) {
                returns_by_h[h].push(v / agent.reward_scale);
            }
        }
        writeln!(
            horizon_csv,
            "{idx},{},{},{}",
            post.expected_horizon,
            post.mean / agent.reward_scale,
            post.var.sqrt() / agent.reward_scale
        )
        .unwrap();
    }
    write_text(&files[1], &horizon_csv)?;

    let mut weights_csv = String::from("h,mean_weight\n");
    for (h, sum) in weight_sums.iter().enumerate() {
        writeln!(weights_csv, "{h},{}", sum / args.transitions as f64).unwrap();
    }
    write_text(&files[2], &weights_csv)?;

    let mut ratio_csv = String::from("h,bin,lo,hi,count\n");
    for (h, ratios) in ratios_by_h.iter().enumerate() {
        hist_rows(&mut ratio_csv, h, &histogram(ratios, 0.0, 1.0));
    }
    write_text(&files[3], &ratio_csv)?;

    let mut return_csv = String::from("h,bin,lo,hi,count\n");
    for (h, values) in returns_by_h.iter().enumerate() {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hist_rows(&mut return_csv, h, &histogram(values, lo, hi));
    }
    write_text(&files[4], &return_csv)?;

    println!(
        "gap mean {:+.4} max {:+.4}; wrote {} files to {}",
        gap.mean_gap,
        gap.max_gap,
        files.len(),
        args.out_dir.display()
    );
    Ok(())
}
