//! `cbop` — generate datasets, pretrain, train, and inspect CBOP agents.
//!
//! Every subcommand exits 0 on success. Failures map onto a small set of
//! exit codes so scripts can branch on the failure class:
//!
//! * 2 — bad configuration or CLI usage (also clap's own usage errors)
//! * 3 — I/O and file-format problems
//! * 4 — numeric divergence / non-finite values during training
//! * 5 — shape mismatches between artifacts (wrong dims, wrong ensemble)

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbop_core::CbopError;

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "cbop",
    version,
    about = "Offline model-based RL with conservative Bayesian value targets",
    after_help = "Seeds resolve as: --seed flag > config file > CBOP_SEED env var > built-in default."
)]
struct Cli {
    /// Upper bound on worker threads. The current implementation is
    /// single-threaded, so anything >= 1 is accepted as a cap.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a behavior-policy dataset on a built-in environment
    GenData(commands::gen_data::Args),
    /// Train the dynamics ensemble and warm-start policy/critic (BC + FQE)
    Pretrain(commands::pretrain::Args),
    /// Run CBOP training epochs from a checkpoint
    Train(commands::train::Args),
    /// Roll out a checkpoint's policy in its environment and report scores
    Eval(commands::eval_cmd::Args),
    /// Dump conservatism, horizon-weight, and variance diagnostics as CSV
    Diagnose(commands::diagnose::Args),
    /// Rank checkpoints by offline FQE value of their policies
    Rank(commands::rank::Args),
}

fn error_class(err: &CbopError) -> &'static str {
    match err {
        CbopError::ShapeMismatch { .. } | CbopError::NotElite { .. } => "shape",
        CbopError::NonFinite { .. } | CbopError::Divergence { .. } => "divergence",
        CbopError::Io { .. } | CbopError::Format(_) => "io",
        CbopError::InvalidConfig(_)
        | CbopError::EmptyInput(_)
        | CbopError::InsufficientData(_)
        | CbopError::UnknownEnv(_) => "config",
    }
}

fn exit_code(err: &CbopError) -> u8 {
    match error_class(err) {
        "shape" => 5,
        "divergence" => 4,
        "io" => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error[config]: --threads must be at least 1");
        return ExitCode::from(2);
    }

    let result = match cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::Pretrain(args) => commands::pretrain::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval_cmd::run(args),
        Command::Diagnose(args) => commands::diagnose::run(args),
        Command::Rank(args) => commands::rank::run(args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", error_class(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
