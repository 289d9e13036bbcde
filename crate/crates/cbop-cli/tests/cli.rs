//! End-to-end tests that drive the compiled `cbop` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cbop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cbop"))
}

/// Fresh scratch directory per test so runs never collide.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("cbop-cli-tests")
        .join(format!("{name}-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn cbop")
}

fn assert_code(out: &Output, want: i32, context: &str) {
    let got = out.status.code().unwrap_or(-1);
    assert_eq!(
        got,
        want,
        "{context}: expected exit {want}, got {got}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_data(dir: &Path, env: &str, tag: &str, size: usize, seed: u64, name: &str) -> PathBuf {
    let out = dir.join(name);
    let status = run(cbop().args([
        "gen-data",
        "--env",
        env,
        "--tag",
        tag,
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_code(&status, 0, "gen-data");
    out
}

/// Small config shared by the pipeline tests: everything shrunk until a
/// full pretrain+train cycle takes a couple of seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
  "dynamics": { "k_total": 3, "k_elite": 2, "hidden": [16, 16], "epochs": 3,
                "batch_size": 64, "lr": 1e-3, "validation_fraction": 0.1,
                "bootstrap_resample": false, "seed": 0 },
  "train": { "horizon": 2, "m": 2, "q_hidden": [16, 16], "policy_hidden": [16, 16],
             "batch_size": 8, "epochs": 2, "steps_per_epoch": 4, "eval_episodes": 2 },
  "bc": { "epochs": 3, "batch_size": 64, "lr": 1e-3, "val_fraction": 0.1, "seed": 0 },
  "fqe": { "rounds": 2, "steps_per_round": 5, "batch_size": 64, "lr": 1e-3,
           "gamma": 0.99, "seed": 0 }
}"#,
    )
    .unwrap();
    path
}

fn pretrain(dir: &Path, dataset: &Path, config: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let status = run(cbop().args([
        "pretrain",
        "--dataset",
        dataset.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_code(&status, 0, "pretrain");
    out
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(cbop().arg("--help"));
    assert_code(&out, 0, "--help");
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["gen-data", "pretrain", "train", "eval", "diagnose", "rank"] {
        assert!(text.contains(name), "--help is missing {name}");
    }
    assert!(text.contains("--threads"), "--help is missing the global --threads flag");
}

#[test]
fn gen_data_is_seed_deterministic_and_respects_overwrite() {
    let dir = scratch("gen-data");
    let a = gen_data(&dir, "point_mass_2d", "random", 300, 11, "a.ds");
    let b = gen_data(&dir, "point_mass_2d", "random", 300, 11, "b.ds");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // same path again: refused without --overwrite, fine with it
    let clobber = run(cbop().args([
        "gen-data", "--env", "point_mass_2d", "--tag", "random", "--size", "300",
        "--seed", "11", "--out", a.to_str().unwrap(),
    ]));
    assert_code(&clobber, 2, "gen-data onto an existing file");
    let forced = run(cbop().args([
        "gen-data", "--env", "point_mass_2d", "--tag", "random", "--size", "300",
        "--seed", "11", "--out", a.to_str().unwrap(), "--overwrite",
    ]));
    assert_code(&forced, 0, "gen-data --overwrite");
}

#[test]
fn cbop_seed_env_var_is_the_default_seed() {
    let dir = scratch("env-seed");
    let via_flag = gen_data(&dir, "pendulum_swing", "random", 200, 9, "flag.ds");
    let env_out = dir.join("env.ds");
    let out = run(cbop()
        .env("CBOP_SEED", "9")
        .args([
            "gen-data", "--env", "pendulum_swing", "--tag", "random", "--size", "200",
            "--out", env_out.to_str().unwrap(),
        ]));
    assert_code(&out, 0, "gen-data with CBOP_SEED");
    assert_eq!(
        std::fs::read(&via_flag).unwrap(),
        std::fs::read(&env_out).unwrap(),
        "CBOP_SEED=9 should match --seed 9 exactly"
    );

    let bad = run(cbop()
        .env("CBOP_SEED", "not-a-number")
        .args([
            "gen-data", "--env", "pendulum_swing", "--tag", "random", "--size", "200",
            "--out", dir.join("bad.ds").to_str().unwrap(),
        ]));
    assert_code(&bad, 2, "unparsable CBOP_SEED");
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let dir = scratch("pipeline");
    let dataset = gen_data(&dir, "point_mass_2d", "medium", 600, 5, "med.ds");
    let config = tiny_config(&dir);
    let pre = pretrain(&dir, &dataset, &config, "pre.ckpt");

    let post = dir.join("post.ckpt");
    let metrics = dir.join("metrics.csv");
    let train = run(cbop().args([
        "train",
        "--checkpoint", pre.to_str().unwrap(),
        "--dataset", dataset.to_str().unwrap(),
        "--config", config.to_str().unwrap(),
        "--out", post.to_str().unwrap(),
        "--metrics", metrics.to_str().unwrap(),
    ]));
    assert_code(&train, 0, "train");
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,actor_loss,critic_loss,mean_target,mean_expected_horizon,eval_return,normalized_score"
    );
    assert_eq!(lines.len(), 3, "2 training epochs -> header + 2 rows");
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));

    let eval_csv = dir.join("eval.csv");
    let eval = run(cbop().args([
        "eval",
        "--checkpoint", post.to_str().unwrap(),
        "--episodes", "3",
        "--out", eval_csv.to_str().unwrap(),
    ]));
    assert_code(&eval, 0, "eval");
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("mean_return="), "eval should report the mean return");
    let eval_rows = std::fs::read_to_string(&eval_csv).unwrap();
    assert_eq!(eval_rows.lines().count(), 4, "header + one row per episode");
    assert_eq!(eval_rows.lines().next().unwrap(), "episode,return,normalized_score");

    let diag_dir = dir.join("diag");
    let diagnose = run(cbop().args([
        "diagnose",
        "--checkpoint", post.to_str().unwrap(),
        "--dataset", dataset.to_str().unwrap(),
        "--out-dir", diag_dir.to_str().unwrap(),
        "--transitions", "6",
        "--gap-states", "4",
    ]));
    assert_code(&diagnose, 0, "diagnose");
    for name in [
        "conservatism.csv",
        "expected_horizon.csv",
        "horizon_weights.csv",
        "variance_ratio_hist.csv",
        "return_hist.csv",
    ] {
        let path = diag_dir.join(name);
        assert!(path.exists(), "diagnose should write {name}");
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.lines().count() > 1, "{name} should have data rows");
    }
    // horizon weights: one row per horizon level 0..=H, summing to ~1
    let weights = std::fs::read_to_string(diag_dir.join("horizon_weights.csv")).unwrap();
    let total: f64 = weights
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert_eq!(weights.lines().count(), 1 + 3, "H=2 -> levels 0,1,2");
    assert!((total - 1.0).abs() < 1e-9, "mean weights should sum to 1, got {total}");

    let rank_csv = dir.join("rank.csv");
    let rank = run(cbop().args([
        "rank",
        "--checkpoint", pre.to_str().unwrap(),
        "--checkpoint", post.to_str().unwrap(),
        "--dataset", dataset.to_str().unwrap(),
        "--config", config.to_str().unwrap(),
        "--reference", "1,2",
        "--out", rank_csv.to_str().unwrap(),
    ]));
    assert_code(&rank, 0, "rank");
    let rank_out = String::from_utf8_lossy(&rank.stdout);
    assert!(
        rank_out.contains("spearman_rho="),
        "rank with --reference should report Spearman rho, got: {rank_out}"
    );
    let rank_body = std::fs::read_to_string(&rank_csv).unwrap();
    assert_eq!(rank_body.lines().next().unwrap(), "index,checkpoint,score,rank");
    assert_eq!(rank_body.lines().count(), 4, "header + 2 entries + rho footer");
}

#[test]
fn train_with_zero_epochs_still_writes_the_artifacts() {
    let dir = scratch("zero-epochs");
    let dataset = gen_data(&dir, "point_mass_2d", "medium", 600, 5, "med.ds");
    let config = tiny_config(&dir);
    let pre = pretrain(&dir, &dataset, &config, "pre.ckpt");

    let post = dir.join("post.ckpt");
    let metrics = dir.join("metrics.csv");
    let train = run(cbop().args([
        "train",
        "--checkpoint", pre.to_str().unwrap(),
        "--dataset", dataset.to_str().unwrap(),
        "--out", post.to_str().unwrap(),
        "--metrics", metrics.to_str().unwrap(),
        "--epochs", "0",
    ]));
    assert_code(&train, 0, "train --epochs 0");
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(
        csv.trim(),
        "epoch,actor_loss,critic_loss,mean_target,mean_expected_horizon,eval_return,normalized_score",
        "no epochs -> header-only metrics file"
    );
    assert!(post.exists(), "the initial state should still be checkpointed");
}

#[test]
fn corrupt_inputs_map_to_the_io_exit_code() {
    let dir = scratch("corrupt");
    let dataset = gen_data(&dir, "point_mass_2d", "random", 200, 1, "ok.ds");

    // flip the magic
    let mut bytes = std::fs::read(&dataset).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    let bad_magic = dir.join("bad-magic.ds");
    std::fs::write(&bad_magic, &bytes).unwrap();
    let out = run(cbop().args([
        "pretrain",
        "--dataset", bad_magic.to_str().unwrap(),
        "--out", dir.join("a.ckpt").to_str().unwrap(),
    ]));
    assert_code(&out, 3, "pretrain on a bad-magic dataset");

    // truncate the container
    let whole = std::fs::read(&dataset).unwrap();
    let cut = dir.join("cut.ds");
    std::fs::write(&cut, &whole[..whole.len() / 2]).unwrap();
    let out = run(cbop().args([
        "pretrain",
        "--dataset", cut.to_str().unwrap(),
        "--out", dir.join("b.ckpt").to_str().unwrap(),
    ]));
    assert_code(&out, 3, "pretrain on a truncated dataset");

    // missing file entirely
    let out = run(cbop().args([
        "eval",
        "--checkpoint", dir.join("nope.ckpt").to_str().unwrap(),
    ]));
    assert_code(&out, 3, "eval on a missing checkpoint");
}

#[test]
fn config_errors_exit_2() {
    let dir = scratch("config-errors");

    let out = run(cbop().args([
        "gen-data", "--env", "marsh_rover", "--tag", "random", "--size", "10",
        "--out", dir.join("x.ds").to_str().unwrap(),
    ]));
    assert_code(&out, 2, "unknown environment id");

    let out = run(cbop().args([
        "gen-data", "--env", "point_mass_2d", "--tag", "sprightly", "--size", "10",
        "--out", dir.join("x.ds").to_str().unwrap(),
    ]));
    assert_code(&out, 2, "unknown behavior tag");

    // clap usage error: required flag missing
    let out = run(cbop().args(["gen-data", "--env", "point_mass_2d"]));
    assert_code(&out, 2, "missing required flags");

    let out = run(cbop().args([
        "--threads", "0",
        "gen-data", "--env", "point_mass_2d", "--tag", "random", "--size", "10",
        "--out", dir.join("x.ds").to_str().unwrap(),
    ]));
    assert_code(&out, 2, "--threads 0");

    // a run config with an unknown key must be rejected, not ignored
    let dataset = gen_data(&dir, "point_mass_2d", "random", 200, 1, "ok.ds");
    let bad_cfg = dir.join("bad.json");
    std::fs::write(&bad_cfg, r#"{ "trian": {} }"#).unwrap();
    let out = run(cbop().args([
        "pretrain",
        "--dataset", dataset.to_str().unwrap(),
        "--config", bad_cfg.to_str().unwrap(),
        "--out", dir.join("c.ckpt").to_str().unwrap(),
    ]));
    assert_code(&out, 2, "config with a misspelled section");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[config]"), "stderr should carry the class: {stderr}");
}

#[test]
fn cross_environment_artifacts_exit_5() {
    let dir = scratch("cross-env");
    let pm = gen_data(&dir, "point_mass_2d", "medium", 600, 5, "pm.ds");
    let pend = gen_data(&dir, "pendulum_swing", "random", 300, 1, "pend.ds");
    let config = tiny_config(&dir);
    let pre = pretrain(&dir, &pm, &config, "pre.ckpt");

    let out = run(cbop().args([
        "train",
        "--checkpoint", pre.to_str().unwrap(),
        "--dataset", pend.to_str().unwrap(),
        "--out", dir.join("z.ckpt").to_str().unwrap(),
        "--metrics", dir.join("z.csv").to_str().unwrap(),
    ]));
    assert_code(&out, 5, "training a point-mass checkpoint on pendulum data");
}

#[test]
fn structural_overrides_are_rejected() {
    let dir = scratch("structural");
    let dataset = gen_data(&dir, "point_mass_2d", "medium", 600, 5, "med.ds");
    let config = tiny_config(&dir);
    let pre = pretrain(&dir, &dataset, &config, "pre.ckpt");

    // same config but with a different head count: the checkpoint fixes m
    let meddled = dir.join("meddled.json");
    let text = std::fs::read_to_string(&config).unwrap().replace("\"m\": 2", "\"m\": 4");
    assert_ne!(text, std::fs::read_to_string(&config).unwrap());
    std::fs::write(&meddled, text).unwrap();

    let out = run(cbop().args([
        "train",
        "--checkpoint", pre.to_str().unwrap(),
        "--dataset", dataset.to_str().unwrap(),
        "--config", meddled.to_str().unwrap(),
        "--out", dir.join("z.ckpt").to_str().unwrap(),
        "--metrics", dir.join("z.csv").to_str().unwrap(),
    ]));
    assert_code(&out, 2, "changing the head count under a checkpoint");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains('m'), "error should name the offending field: {stderr}");
}

#[test]
fn training_divergence_exits_4_and_keeps_the_metrics_file() {
    let dir = scratch("divergence");
    let dataset = gen_data(&dir, "point_mass_2d", "medium", 600, 5, "med.ds");
    let config = tiny_config(&dir);
    let pre = pretrain(&dir, &dataset, &config, "pre.ckpt");

    let metrics = dir.join("metrics.csv");
    let out = run(cbop().args([
        "train",
        "--checkpoint", pre.to_str().unwrap(),
        "--dataset", dataset.to_str().unwrap(),
        "--out", dir.join("z.ckpt").to_str().unwrap(),
        "--metrics", metrics.to_str().unwrap(),
        "--epochs", "3",
        "--lr-critic", "1e12",
    ]));
    assert_code(&out, 4, "absurd critic learning rate");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[divergence]"), "stderr: {stderr}");
    assert!(metrics.exists(), "partial metrics should survive the abort");
}

#[test]
fn eval_seed_resolution_prefers_the_flag() {
    let dir = scratch("eval-seed");
    let dataset = gen_data(&dir, "point_mass_2d", "medium", 600, 5, "med.ds");
    let config = tiny_config(&dir);
    let pre = pretrain(&dir, &dataset, &config, "pre.ckpt");

    let run_eval = |seed: Option<&str>| -> String {
        let mut cmd = cbop();
        cmd.args(["eval", "--checkpoint", pre.to_str().unwrap(), "--episodes", "2"]);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        let out = run(&mut cmd);
        assert_code(&out, 0, "eval");
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    let default = run_eval(None);
    let same = run_eval(None);
    assert_eq!(default, same, "same resolved seed -> identical evaluation");
    let other = run_eval(Some("1234567"));
    assert_ne!(default, other, "a different seed should change the episodes");
}
