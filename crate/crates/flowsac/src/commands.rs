//! The four subcommands. Each takes a validated [`Config`] and writes its
//! artifacts into a fresh output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use flowsac_core::lqr::{discounted_return, InitialState, LqrSystem, ReturnEstimate};
use flowsac_core::oracle::{
    discounted_closed_loop_radius, riccati_residual, riccati_value_iteration, RiccatiSolution, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use flowsac_core::rng::{stream_rng, Stream};
use flowsac_core::sac::{LogRow, Trainer};
use flowsac_core::Matrix;
use serde::Serialize;

use crate::bench::{run_bench, BenchRow, BenchSpec, CSV_HEADER};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::evaluate::{evaluate_policy, states_header, EvalSettings, EvalSummary, SUMMARY_HEADER};
use crate::CliError;

pub const TRAIN_LOG_HEADER: &str =
    "episode,eval_return_mean,eval_return_stderr,loss_q,loss_pi,weight_entropy,grad_norm_q,grad_norm_pi";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Creates `dir`, refusing to reuse a directory that already has content.
pub fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        if entries.next().is_some() {
            return Err(CliError::Config(format!(
                "refusing to write into non-empty output directory {}",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn required_out(cfg: &Config, out: Option<&Path>) -> Result<PathBuf, CliError> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("an output directory is required (--out or config `out_dir`)".to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct ReturnReport {
    pub mean: f64,
    pub std_err: f64,
    pub n_traj: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub alpha: f64,
    pub gamma: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
    pub c: f64,
    pub iterations: usize,
    pub riccati_residual: f64,
    pub closed_loop_radius: f64,
    /// Monte-Carlo unregularized discounted return of `N(−K*x, Σ*)`.
    pub optimal_return: ReturnReport,
    /// The same return over an infinite horizon, in closed form.
    pub optimal_return_infinite_horizon: f64,
}

/// Unregularized infinite-horizon return of the linear-Gaussian policy in
/// `sol` from the system's initial state law.
pub fn closed_form_unregularized_return(sys: &LqrSystem, sol: &RiccatiSolution) -> Result<f64, CliError> {
    let bt = sys.b().transpose();
    let h = sys.r().add(&bt.matmul(&sol.p)?.matmul(sys.b())?.scale(sys.gamma()))?;
    let c0 = (h.matmul(&sol.sigma)?.trace() + sys.gamma() * sol.p.matmul(sys.sigma_w())?.trace()) / (1.0 - sys.gamma());
    let quad =
        |m: &Matrix, v: &[f64]| -> Result<f64, CliError> { Ok(m.matvec(v)?.iter().zip(v).map(|(a, b)| a * b).sum()) };
    let start = match sys.initial_state() {
        InitialState::Fixed(x) => quad(&sol.p, x.as_slice())?,
        InitialState::Gaussian { mean, cov } => quad(&sol.p, mean.as_slice())? + sol.p.matmul(cov)?.trace(),
    };
    Ok(-start - c0)
}

pub fn cmd_oracle(cfg: &Config, out: Option<&Path>) -> Result<OracleReport, CliError> {
    let out = out.map(Path::to_path_buf).or_else(|| cfg.out_dir.clone());
    if let Some(dir) = &out {
        prepare_out_dir(dir)?;
    }
    let sys = cfg.build_system()?;
    let sol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let policy = sol.policy()?;
    let mut rng = stream_rng(cfg.seed, Stream::Evaluation, 0);
    let ret: ReturnEstimate = discounted_return(
        &sys,
        |x, rng| policy.sample(x, rng),
        cfg.oracle.return_horizon,
        cfg.oracle.return_n_traj,
        None,
        &mut rng,
    )?;
    let report = OracleReport {
        alpha: sys.alpha(),
        gamma: sys.gamma(),
        state_dim: sys.state_dim(),
        action_dim: sys.action_dim(),
        p: sol.p.to_rows(),
        k: sol.k.to_rows(),
        sigma: sol.sigma.to_rows(),
        c: sol.c,
        iterations: sol.iterations,
        riccati_residual: riccati_residual(&sys, &sol.p, &sol.k)?,
        closed_loop_radius: discounted_closed_loop_radius(&sys, &sol.k)?,
        optimal_return: ReturnReport {
            mean: ret.mean,
            std_err: ret.std_err,
            n_traj: cfg.oracle.return_n_traj,
            horizon: cfg.oracle.return_horizon,
        },
        optimal_return_infinite_horizon: closed_form_unregularized_return(&sys, &sol)?,
    };
    if let Some(dir) = &out {
        write_file(dir, "oracle.json", &report_json(&report))?;
        write_file(
            dir,
            "oracle.ckpt",
            &Checkpoint::from_gaussian(&policy, sys.alpha()).to_json(),
        )?;
    }
    Ok(report)
}

pub fn report_json(report: &OracleReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn log_row_csv(row: &LogRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        row.episode,
        row.eval_return_mean,
        row.eval_return_stderr,
        row.loss_q,
        row.loss_pi,
        row.weight_entropy,
        row.grad_norm_q,
        row.grad_norm_pi
    )
}

/// Outcome of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<LogRow>,
    pub final_checkpoint: PathBuf,
}

/// Trains for `cfg.episodes` episodes. Writes `config.json`, `train_log.csv`,
/// a checkpoint at every evaluation, and `final.ckpt`. If training diverges,
/// `abort.txt` and `abort.ckpt` capture the failure before the error is
/// returned.
pub fn cmd_train(cfg: &Config, out: Option<&Path>, progress: bool) -> Result<TrainOutcome, CliError> {
    let dir = required_out(cfg, out)?;
    let sys = cfg.build_system()?;
    let sac = cfg.sac.to_sac_config();
    let mut trainer = Trainer::new(sys.clone(), sac.clone(), cfg.seed)?;
    prepare_out_dir(&dir)?;
    write_file(
        &dir,
        "config.json",
        &(serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"),
    )?;
    let log_path = dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    writeln!(log, "{TRAIN_LOG_HEADER}").map_err(|e| io_err(&log_path, e))?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let mut rows = Vec::new();
    let alpha = sys.alpha();
    for _ in 0..cfg.episodes {
        match trainer.step() {
            Ok(Some(row)) => {
                writeln!(log, "{}", log_row_csv(&row)).map_err(|e| io_err(&log_path, e))?;
                log.flush().map_err(|e| io_err(&log_path, e))?;
                let name = format!("ckpt_{:08}.ckpt", row.episode);
                write_file(
                    &dir,
                    &name,
                    &Checkpoint::from_training(trainer.state(), alpha, sac.ode_steps_eval).to_json(),
                )?;
                if progress {
                    eprintln!(
                        "episode {:>8}  return {:.4} ± {:.4}  loss_q {:.4}  loss_pi {:.4}",
                        row.episode, row.eval_return_mean, row.eval_return_stderr, row.loss_q, row.loss_pi
                    );
                }
                rows.push(row);
            }
            Ok(None) => {}
            Err(e) => {
                write_file(&dir, "abort.txt", &format!("{e}\n"))?;
                write_file(
                    &dir,
                    "abort.ckpt",
                    &Checkpoint::from_training(trainer.state(), alpha, sac.ode_steps_eval).to_json(),
                )?;
                return Err(e.into());
            }
        }
    }
    let final_checkpoint = write_file(
        &dir,
        "final.ckpt",
        &Checkpoint::from_training(trainer.state(), alpha, sac.ode_steps_eval).to_json(),
    )?;
    Ok(TrainOutcome {
        out_dir: dir,
        rows,
        final_checkpoint,
    })
}

/// Evaluates a checkpoint against the configured system's optimum. Writes
/// `eval_states.csv` (one row per visited state) and `eval_summary.csv`.
pub fn cmd_evaluate(
    cfg: &Config,
    checkpoint: &Path,
    settings: EvalSettings,
    ode_steps: Option<usize>,
    out: Option<&Path>,
    threads: usize,
) -> Result<EvalSummary, CliError> {
    let dir = required_out(cfg, out)?;
    let sys = cfg.build_system()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let policy = ckpt.policy(ode_steps.or(cfg.evaluate.ode_steps))?;
    let optimum = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let (rows, summary) = evaluate_policy(&sys, &policy, &optimum, settings, cfg.seed, threads)?;
    prepare_out_dir(&dir)?;
    let mut states = states_header(sys.state_dim(), sys.action_dim());
    states.push('\n');
    for r in &rows {
        states.push_str(&r.csv_line());
        states.push('\n');
    }
    write_file(&dir, "eval_states.csv", &states)?;
    write_file(
        &dir,
        "eval_summary.csv",
        &format!("{SUMMARY_HEADER}\n{}\n", summary.csv_line()),
    )?;
    Ok(summary)
}

/// Runs the static ISFM sweep and writes `isfm_bench.csv`.
pub fn cmd_isfm_bench(cfg: &Config, out: Option<&Path>, threads: usize) -> Result<Vec<BenchRow>, CliError> {
    let dir = required_out(cfg, out)?;
    let spec = BenchSpec::from_section(&cfg.isfm_bench)?;
    prepare_out_dir(&dir)?;
    let rows = run_bench(&spec, cfg.seed, threads)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write_file(&dir, "isfm_bench.csv", &csv)?;
    Ok(rows)
}
