//! End-to-end tests of the `saec` binary: exit codes per failure class,
//! output-directory locking, and byte-level determinism of the CSVs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_saec");

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("saec-cli-tests")
        .join(format!("{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// A fast-but-real config: tiny network, two-step episodes.
fn write_tiny_config(dir: &Path, out: &Path, iterations: u64, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "# test configuration\n\
         height = 8\nwidth = 8\nlevels = 2\nwidths = 2,3\nz_dim = 2\n\
         activation = tanh\nhorizon = 2\nbatch = 4\ncapacity = 64\n\
         min_buffer = 4\ngrad_steps = 1\niterations = {iterations}\n\
         checkpoint_interval = 0\neval_episodes = 2\nseed = 5\n\
         out_dir = {}\n{extra}",
        out.display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_then_eval_succeed_with_exit_zero() {
    let dir = fresh_dir("ok");
    let train_out = dir.join("train");
    let cfg = write_tiny_config(&dir, &train_out, 3, "");

    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(train_out.join("train.csv").exists());
    assert!(train_out.join("final.ckpt").exists());
    assert!(train_out.join("resolved.cfg").exists());
    assert!(!train_out.join(".lock").exists(), "lock must be released");

    let eval_out = dir.join("eval");
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        train_out.join("final.ckpt").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(eval_out.join("eval.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("psnr"), "summary line missing: {stdout}");

    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn config_errors_exit_2_with_line_numbers() {
    let dir = fresh_dir("bad-config");
    let cfg = dir.join("bad.cfg");
    fs::write(&cfg, "gamma = 0.9\nbogus_key = 1\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("bogus_key"), "{err}");

    // Unknown subcommands and missing args also exit 2 (clap's usage code).
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["eval"]); // missing --checkpoint
    assert_eq!(out.status.code(), Some(2));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn numeric_blowup_exits_3() {
    let dir = fresh_dir("blowup");
    let out_dir = dir.join("out");
    // An absurd learning rate overflows the network within a few steps;
    // min_buffer = 4 makes updates start at iteration 2.
    let cfg = write_tiny_config(&dir, &out_dir, 50, "lr_dl = 1e300\nlr_q = 1e300\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(err.contains("non-finite"), "{err}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn io_failures_exit_4() {
    let dir = fresh_dir("io");
    let out_dir = dir.join("out");

    // Missing checkpoint file.
    let cfg = write_tiny_config(&dir, &out_dir, 1, "");
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        dir.join("nope.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr_of(&out));

    // Lock contention.
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".lock"), b"").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("another run"),
        "{}",
        stderr_of(&out)
    );
    fs::remove_file(out_dir.join(".lock")).unwrap();

    // Unreadable dataset directory.
    let cfg2 = dir.join("dir.cfg");
    fs::write(
        &cfg2,
        format!(
            "dataset = directory\ndata_dir = {}\nout_dir = {}\n",
            dir.join("no-such-dir").display(),
            dir.join("out2").display()
        ),
    )
    .unwrap();
    let out = run(&["train", "--config", cfg2.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr_of(&out));

    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn same_seed_binary_runs_are_byte_identical() {
    let dir = fresh_dir("determinism");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let cfg_a = write_tiny_config(&dir, &out_a, 4, "");
    let out = run(&["train", "--config", cfg_a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    // Same config, different out dir via the --out override.
    let out = run(&[
        "train",
        "--config",
        cfg_a.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let a = fs::read(out_a.join("train.csv")).unwrap();
    let b = fs::read(out_b.join("train.csv")).unwrap();
    assert_eq!(a, b);

    // A different seed diverges.
    let out_c = dir.join("c");
    let out = run(&[
        "train",
        "--config",
        cfg_a.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let c = fs::read(out_c.join("train.csv")).unwrap();
    assert_ne!(a, c);

    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn export_samples_writes_images() {
    let dir = fresh_dir("export");
    let out_dir = dir.join("out");
    let cfg = write_tiny_config(&dir, &out_dir, 1, "");
    let out = run(&["export-samples", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let samples = fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(samples, 64); // 32 input/target pairs
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn out_root_env_var_reroots_output() {
    let dir = fresh_dir("out-root");
    let cfg = dir.join("run.cfg");
    // Relative out_dir, rerooted under the env var.
    fs::write(
        &cfg,
        "height = 8\nwidth = 8\nlevels = 2\nwidths = 2,3\nz_dim = 2\n\
         activation = tanh\nhorizon = 2\nbatch = 4\ncapacity = 64\n\
         min_buffer = 4\ngrad_steps = 1\niterations = 0\n\
         checkpoint_interval = 0\nout_dir = nested/run\n",
    )
    .unwrap();
    let out = Command::new(BIN)
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("SAEC_OUT_ROOT", &dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.join("nested/run/train.csv").exists());
    let _ = fs::remove_dir_all(&dir);
}
