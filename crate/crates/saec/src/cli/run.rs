//! Run orchestration: training with CSV metrics + checkpoints + sample
//! grids, deterministic evaluation, and dataset sample export.
//!
//! Every run owns one output directory and writes nothing outside it. A
//! `.lock` file (created with `create_new`) makes concurrent runs on the
//! same directory fail fast instead of interleaving writes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::env::{env_reset, env_step, metrics, pnm::write_pnm, DataSource, EnvState, Split};
use crate::rng::{mix, streams};
use crate::tensor::Tensor as GenTensor;
use crate::trainer::{load_checkpoint, save_checkpoint, IterationReport, Trainer};
use crate::{Elem, Tensor};

use super::config::RunConfig;
use super::CliError;

/// Environment variable that re-roots relative output directories; CI sets
/// it to keep run artifacts out of the working tree.
pub const OUT_ROOT_ENV: &str = "SAEC_OUT_ROOT";

/// Exact header of `train.csv`. One row per iteration; the seven loss
/// columns are empty while the replay buffer is still warming up.
pub const TRAIN_CSV_HEADER: &str =
    "step,episode,reward_mean,psnr,ssim,l_rec,l_adv,j_q1,j_q2,j_pi,alpha,mean_logprob";

/// Exact header of `eval.csv`: one row per evaluation episode.
pub const EVAL_CSV_HEADER: &str = "episode,psnr,ssim";

/// Number of dataset samples written by `export-samples`.
pub const EXPORT_SAMPLES: usize = 32;

/// Number of evaluation episodes that also get a sample grid image.
const EVAL_GRIDS: usize = 8;

/// What a training run produced, for callers that drive runs in-process.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Iterations executed by this invocation (0 when the checkpoint had
    /// already reached the configured total).
    pub iterations_run: u64,
    /// Final-state PSNR of the last episode, if any iteration ran.
    pub final_psnr: Option<f64>,
    pub csv_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

/// Mean/σ of the two quality metrics over the evaluation episodes.
#[derive(Debug, Clone, Copy)]
pub struct EvalSummary {
    pub episodes: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

/// Resolve the effective output directory: relative paths are joined under
/// `SAEC_OUT_ROOT` when that variable is set.
pub fn resolve_out_dir(out_dir: &str) -> PathBuf {
    let path = PathBuf::from(out_dir);
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path,
    }
}

/// Exclusive ownership of an output directory; the lock file is removed on
/// drop (including unwinding).
struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn io_err(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        msg: err.to_string(),
    }
}

fn acquire_lock(dir: &Path) -> Result<LockGuard, CliError> {
    let path = dir.join(".lock");
    match fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
    {
        Ok(_) => Ok(LockGuard { path }),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(io_err(
            &path,
            "another run owns this output directory (delete the .lock file if it is stale)",
        )),
        Err(e) => Err(io_err(&path, e)),
    }
}

/// Create the output directory, lock it, and write the resolved config.
fn open_out_dir(cfg: &RunConfig) -> Result<(PathBuf, LockGuard), CliError> {
    let out = resolve_out_dir(&cfg.out_dir);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let lock = acquire_lock(&out)?;
    let resolved = out.join("resolved.cfg");
    fs::write(&resolved, cfg.to_config_string()).map_err(|e| io_err(&resolved, e))?;
    Ok((out, lock))
}

/// Shortest-round-trip decimal formatting; the reason two same-seed runs
/// produce byte-identical CSVs is that every value is formatted this way
/// from bit-identical floats.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn csv_row(step: u64, report: &IterationReport) -> String {
    let losses = match &report.losses {
        Some(l) => format!(
            "{},{},{},{},{},{},{}",
            fmt(l.l_rec),
            fmt(l.l_adv),
            fmt(l.j_q1),
            fmt(l.j_q2),
            fmt(l.j_pi),
            fmt(l.alpha_value),
            fmt(l.mean_logprob)
        ),
        None => ",,,,,,".to_string(),
    };
    format!(
        "{step},{},{},{},{},{losses}",
        report.episode,
        fmt(report.reward_mean),
        fmt(report.final_psnr),
        fmt(report.final_ssim)
    )
}

/// Concatenate same-height images side by side: `[c, h, w_i]` → `[c, h, Σw]`.
fn hcat(images: &[Tensor]) -> Result<Tensor, CliError> {
    assert!(!images.is_empty());
    let (c, h) = (images[0].shape()[0], images[0].shape()[1]);
    let total_w: usize = images.iter().map(|im| im.shape()[2]).sum();
    let mut data = Vec::with_capacity(c * h * total_w);
    for ch in 0..c {
        for row in 0..h {
            for im in images {
                let w = im.shape()[2];
                let src = im.data();
                let start = (ch * h + row) * w;
                data.extend_from_slice(&src[start..start + w]);
            }
        }
    }
    Ok(GenTensor::constant(&[c, h, total_w], data).map_err(crate::trainer::TrainerError::from)?)
}

fn grid_extension(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

/// Roll one episode with the deterministic policy; returns the visited
/// states' images as grid columns `[input, step 1, …, step T, target]`
/// plus the final state's PSNR and SSIM.
fn deterministic_episode(
    trainer: &Trainer<Elem>,
    source: &DataSource<Elem>,
    seed: u64,
) -> Result<(Vec<Tensor>, f64, f64), CliError> {
    let horizon = trainer.settings.horizon;
    let (mut state, y): (EnvState<Elem>, Tensor) = env_reset(source, Split::Eval, seed, horizon)
        .map_err(crate::trainer::TrainerError::from)?;
    let mut cols = vec![state.current.clone()];
    for _ in 0..horizon {
        let y_tilde = trainer.propose_deterministic(&state.current)?;
        let (next, _r, _done) = env_step(&state, &y_tilde, &trainer.settings.reward)
            .map_err(crate::trainer::TrainerError::from)?;
        cols.push(next.current.clone());
        state = next;
    }
    let psnr = metrics::psnr(&state.current, &y).map_err(crate::trainer::TrainerError::from)?;
    let ssim = metrics::ssim(&state.current, &y).map_err(crate::trainer::TrainerError::from)?;
    cols.push(y);
    Ok((cols, psnr, ssim))
}

fn write_grid(path: &Path, cols: &[Tensor]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let grid = hcat(cols)?;
    write_pnm(path, &grid).map_err(crate::trainer::TrainerError::from)?;
    Ok(())
}

/// Train until the iteration counter reaches `cfg.iterations`, starting
/// fresh or from `resume`. Writes `train.csv`, periodic + final
/// checkpoints, and a sample grid alongside each checkpoint.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    let (out, _lock) = open_out_dir(cfg)?;
    let source = cfg.data_source().map_err(CliError::Env)?;
    let settings = cfg.to_settings();

    let mut trainer: Trainer<Elem> = match resume {
        Some(path) => load_checkpoint(path, &settings)?,
        None => Trainer::new(settings)?,
    };

    let csv_path = out.join("train.csv");
    let csv_file = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(csv_file);
    writeln!(csv, "{TRAIN_CSV_HEADER}").map_err(|e| io_err(&csv_path, e))?;

    let total = cfg.iterations;
    let start = trainer.counters.iterations;
    if start > 0 {
        println!(
            "resuming at iteration {start} ({} env steps so far)",
            trainer.counters.env_steps
        );
    }
    let print_every = (total / 10).max(1);
    let mut last_psnr = None;

    while trainer.counters.iterations < total {
        let report = trainer.train_iteration(&source)?;
        let step = trainer.counters.iterations;
        writeln!(csv, "{}", csv_row(step, &report)).map_err(|e| io_err(&csv_path, e))?;
        csv.flush().map_err(|e| io_err(&csv_path, e))?;
        last_psnr = Some(report.final_psnr);

        if step % print_every == 0 || step == total {
            println!(
                "iter {step}/{total}  reward {:.4}  psnr {:.2}  ssim {:.4}",
                report.reward_mean, report.final_psnr, report.final_ssim
            );
        }
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step < total {
            let ckpt = out.join(format!("checkpoint-{step:08}.ckpt"));
            save_checkpoint(&ckpt, &trainer)?;
            let seed = mix(cfg.seed, streams::EVAL, step);
            let (cols, _, _) = deterministic_episode(&trainer, &source, seed)?;
            let grid = out
                .join("samples")
                .join(format!("grid-{step:08}.{}", grid_extension(cfg.channels)));
            write_grid(&grid, &cols)?;
        }
    }

    let final_ckpt = out.join("final.ckpt");
    save_checkpoint(&final_ckpt, &trainer)?;
    let seed = mix(cfg.seed, streams::EVAL, trainer.counters.iterations);
    let (cols, _, _) = deterministic_episode(&trainer, &source, seed)?;
    let grid = out
        .join("samples")
        .join(format!("grid-final.{}", grid_extension(cfg.channels)));
    write_grid(&grid, &cols)?;

    let iterations_run = trainer.counters.iterations - start;
    println!(
        "done: {iterations_run} iterations, checkpoint {}",
        final_ckpt.display()
    );
    Ok(TrainSummary {
        iterations_run,
        final_psnr: last_psnr,
        csv_path,
        final_checkpoint: final_ckpt,
        out_dir: out,
    })
}

/// Evaluate a checkpoint with the deterministic policy (`z = tanh(μ)`) on
/// the eval split. Writes `eval.csv` plus grids for the first few episodes
/// and prints a mean/σ summary.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalSummary, CliError> {
    let (out, _lock) = open_out_dir(cfg)?;
    let source = cfg.data_source().map_err(CliError::Env)?;
    let settings = cfg.to_settings();
    let trainer: Trainer<Elem> = load_checkpoint(checkpoint, &settings)?;

    let csv_path = out.join("eval.csv");
    let csv_file = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(csv_file);
    writeln!(csv, "{EVAL_CSV_HEADER}").map_err(|e| io_err(&csv_path, e))?;

    let n = cfg.eval_episodes;
    let mut psnrs = Vec::with_capacity(n);
    let mut ssims = Vec::with_capacity(n);
    for e in 0..n {
        let seed = mix(cfg.seed, streams::EVAL, e as u64);
        let (cols, psnr, ssim) = deterministic_episode(&trainer, &source, seed)?;
        writeln!(csv, "{e},{},{}", fmt(psnr), fmt(ssim)).map_err(|e| io_err(&csv_path, e))?;
        if e < EVAL_GRIDS {
            let grid = out
                .join("samples")
                .join(format!("eval-{e:03}.{}", grid_extension(cfg.channels)));
            write_grid(&grid, &cols)?;
        }
        psnrs.push(psnr);
        ssims.push(ssim);
    }
    csv.flush().map_err(|e| io_err(&csv_path, e))?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64], m: f64| {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let (pm, sm) = (mean(&psnrs), mean(&ssims));
    let summary = EvalSummary {
        episodes: n,
        psnr_mean: pm,
        psnr_std: std(&psnrs, pm),
        ssim_mean: sm,
        ssim_std: std(&ssims, sm),
    };
    println!(
        "eval over {n} episodes: psnr {:.3} ± {:.3}, ssim {:.4} ± {:.4}",
        summary.psnr_mean, summary.psnr_std, summary.ssim_mean, summary.ssim_std
    );
    Ok(summary)
}

/// Write [`EXPORT_SAMPLES`] dataset draws as image pairs: the masked
/// observation the agent would start from, and the ground-truth target.
pub fn run_export_samples(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let (out, _lock) = open_out_dir(cfg)?;
    let source = cfg.data_source().map_err(CliError::Env)?;
    let ext = grid_extension(cfg.channels);
    for k in 0..EXPORT_SAMPLES {
        // Counter 0 of the dataset stream is reserved for the directory
        // shuffle, so exports start at 1.
        let seed = mix(cfg.seed, streams::DATASET, 1 + k as u64);
        let (state, y) = env_reset(&source, Split::Train, seed, cfg.horizon)
            .map_err(crate::trainer::TrainerError::from)?;
        let input = out.join(format!("sample-{k:02}-input.{ext}"));
        let target = out.join(format!("sample-{k:02}-target.{ext}"));
        write_pnm(&input, &state.current).map_err(crate::trainer::TrainerError::from)?;
        write_pnm(&target, &y).map_err(crate::trainer::TrainerError::from)?;
    }
    println!(
        "wrote {EXPORT_SAMPLES} input/target pairs to {}",
        out.display()
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::parse_config;

    fn tiny_cfg(out: &Path, iterations: u64) -> RunConfig {
        let text = format!(
            "height = 8\nwidth = 8\nlevels = 2\nwidths = 2,3\nz_dim = 2\n\
             activation = tanh\nhorizon = 2\nbatch = 4\ncapacity = 64\n\
             min_buffer = 4\ngrad_steps = 1\niterations = {iterations}\n\
             checkpoint_interval = 2\neval_episodes = 3\nseed = 11\n\
             out_dir = {}\n",
            out.display()
        );
        parse_config(&text).unwrap()
    }

    fn fresh_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join("saec-run-tests")
            .join(format!("{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn zero_iterations_writes_header_and_final_checkpoint() {
        let dir = fresh_dir("zero-iters");
        let cfg = tiny_cfg(&dir, 0);
        let summary = run_train(&cfg, None).unwrap();
        assert_eq!(summary.iterations_run, 0);
        let csv = fs::read_to_string(&summary.csv_path).unwrap();
        assert_eq!(csv, format!("{TRAIN_CSV_HEADER}\n"));
        assert!(summary.final_checkpoint.exists());
        // Lock released after the run.
        assert!(!dir.join(".lock").exists());
        // Resolved config re-parses to the same config.
        let echoed = fs::read_to_string(dir.join("resolved.cfg")).unwrap();
        assert_eq!(parse_config(&echoed).unwrap(), cfg);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn same_seed_runs_produce_identical_csv_bytes() {
        let dir_a = fresh_dir("det-a");
        let dir_b = fresh_dir("det-b");
        let a = run_train(&tiny_cfg(&dir_a, 5), None).unwrap();
        let b = run_train(&tiny_cfg(&dir_b, 5), None).unwrap();
        let bytes_a = fs::read(&a.csv_path).unwrap();
        let bytes_b = fs::read(&b.csv_path).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert!(!bytes_a.is_empty());
        // Rows carry losses once the buffer warms up (min_buffer = 4 fills
        // after two 2-step episodes).
        let text = String::from_utf8(bytes_a).unwrap();
        let last = text.lines().last().unwrap();
        assert!(!last.ends_with(",,,,,,"), "expected losses in: {last}");
        let _ = fs::remove_dir_all(&dir_a);
        let _ = fs::remove_dir_all(&dir_b);
    }

    #[test]
    fn resume_completes_the_csv_tail_bit_for_bit() {
        let dir_full = fresh_dir("resume-full");
        let dir_part = fresh_dir("resume-part");
        let dir_tail = fresh_dir("resume-tail");

        let full = run_train(&tiny_cfg(&dir_full, 6), None).unwrap();
        let part = run_train(&tiny_cfg(&dir_part, 4), None).unwrap();
        // Same config but a larger target, resuming from the 4-iteration
        // checkpoint: runs iterations 5 and 6 only.
        let tail = run_train(&tiny_cfg(&dir_tail, 6), Some(&part.final_checkpoint)).unwrap();
        assert_eq!(tail.iterations_run, 2);

        let full_text = fs::read_to_string(&full.csv_path).unwrap();
        let part_text = fs::read_to_string(&part.csv_path).unwrap();
        let tail_text = fs::read_to_string(&tail.csv_path).unwrap();
        let full_rows: Vec<&str> = full_text.lines().collect();
        let part_rows: Vec<&str> = part_text.lines().collect();
        let tail_rows: Vec<&str> = tail_text.lines().collect();
        assert_eq!(full_rows.len(), 7); // header + 6
        assert_eq!(&full_rows[..5], &part_rows[..]);
        assert_eq!(tail_rows[0], TRAIN_CSV_HEADER);
        assert_eq!(&full_rows[5..], &tail_rows[1..]);

        let _ = fs::remove_dir_all(&dir_full);
        let _ = fs::remove_dir_all(&dir_part);
        let _ = fs::remove_dir_all(&dir_tail);
    }

    #[test]
    fn lock_excludes_concurrent_runs_and_is_released() {
        let dir = fresh_dir("lock");
        fs::create_dir_all(&dir).unwrap();
        let guard = acquire_lock(&dir).unwrap();
        let cfg = tiny_cfg(&dir, 1);
        let err = run_train(&cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), crate::cli::exit_codes::IO);
        assert!(err.to_string().contains("another run"), "{err}");
        drop(guard);
        run_train(&cfg, None).unwrap();
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn eval_writes_per_episode_rows_and_grids() {
        let train_dir = fresh_dir("eval-train");
        let eval_dir = fresh_dir("eval-out");
        let trained = run_train(&tiny_cfg(&train_dir, 2), None).unwrap();

        let mut cfg = tiny_cfg(&eval_dir, 2);
        cfg.out_dir = eval_dir.display().to_string();
        let summary = run_eval(&cfg, &trained.final_checkpoint).unwrap();
        assert_eq!(summary.episodes, 3);
        assert!(summary.psnr_mean.is_finite());
        assert!(summary.ssim_mean.is_finite());
        assert!(summary.psnr_std >= 0.0);

        let text = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], EVAL_CSV_HEADER);
        assert_eq!(rows.len(), 4);
        for e in 0..3 {
            assert!(eval_dir
                .join("samples")
                .join(format!("eval-{e:03}.pgm"))
                .exists());
        }
        // Determinism: a second eval into a fresh dir gives identical CSV.
        let eval_dir2 = fresh_dir("eval-out2");
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = eval_dir2.display().to_string();
        run_eval(&cfg2, &trained.final_checkpoint).unwrap();
        let text2 = fs::read_to_string(eval_dir2.join("eval.csv")).unwrap();
        assert_eq!(text, text2);

        let _ = fs::remove_dir_all(&train_dir);
        let _ = fs::remove_dir_all(&eval_dir);
        let _ = fs::remove_dir_all(&eval_dir2);
    }

    #[test]
    fn eval_rejects_incompatible_checkpoint() {
        let train_dir = fresh_dir("incompat-train");
        let eval_dir = fresh_dir("incompat-eval");
        let trained = run_train(&tiny_cfg(&train_dir, 1), None).unwrap();

        let mut cfg = tiny_cfg(&eval_dir, 1);
        cfg.z_dim = 3; // different architecture than the checkpoint
        let err = run_eval(&cfg, &trained.final_checkpoint).unwrap_err();
        assert_eq!(err.exit_code(), crate::cli::exit_codes::IO);

        let _ = fs::remove_dir_all(&train_dir);
        let _ = fs::remove_dir_all(&eval_dir);
    }

    #[test]
    fn export_samples_writes_pairs() {
        let dir = fresh_dir("export");
        let cfg = tiny_cfg(&dir, 1);
        let out = run_export_samples(&cfg).unwrap();
        for k in 0..EXPORT_SAMPLES {
            assert!(out.join(format!("sample-{k:02}-input.pgm")).exists());
            assert!(out.join(format!("sample-{k:02}-target.pgm")).exists());
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn checkpoint_interval_writes_periodic_checkpoints_and_grids() {
        let dir = fresh_dir("interval");
        let cfg = tiny_cfg(&dir, 5); // interval 2 → checkpoints at 2 and 4
        run_train(&cfg, None).unwrap();
        assert!(dir.join("checkpoint-00000002.ckpt").exists());
        assert!(dir.join("checkpoint-00000004.ckpt").exists());
        assert!(!dir.join("checkpoint-00000005.ckpt").exists());
        assert!(dir.join("final.ckpt").exists());
        assert!(dir.join("samples").join("grid-00000002.pgm").exists());
        assert!(dir.join("samples").join("grid-final.pgm").exists());
        // Grid geometry: input + T steps + target columns, 8 rows.
        let grid: Tensor =
            crate::env::pnm::read_pnm(&dir.join("samples").join("grid-final.pgm")).unwrap();
        assert_eq!(grid.shape(), &[1, 8, 8 * (2 + 2)]);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn out_root_env_var_reroots_relative_dirs() {
        // Only exercises path resolution; the env var itself is left alone
        // because tests in one process share the environment.
        assert_eq!(resolve_out_dir("/abs/path"), PathBuf::from("/abs/path"));
        let rel = resolve_out_dir("runs/x");
        assert!(rel.ends_with("runs/x"));
    }
}
