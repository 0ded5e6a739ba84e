use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowsac::commands::{cmd_evaluate, cmd_isfm_bench, cmd_oracle, cmd_train, report_json};
use flowsac::config::Config;
use flowsac::evaluate::EvalSettings;
use flowsac::{threads, CliError};

#[derive(Parser)]
#[command(
    name = "flowsac",
    version,
    about = "Max-entropy LQR with flow policies: oracle, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the closed-form optimum of the configured system as JSON.
    Oracle(Common),
    /// Train a flow policy with SAC-ISFM.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare a checkpointed policy with the optimum along its trajectories.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        traj_len: Option<usize>,
        #[arg(long)]
        n_action_samples: Option<usize>,
        #[arg(long)]
        ode_steps: Option<usize>,
    },
    /// Fit static flows with importance-weighted samples over a grid of
    /// sample sizes and sampling widths.
    IsfmBench(Common),
}

fn load(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Oracle(common) => {
            let cfg = load(&common)?;
            let report = cmd_oracle(&cfg, common.out.as_deref())?;
            print!("{}", report_json(&report));
        }
        Command::Train { common, episodes } => {
            let mut cfg = load(&common)?;
            if let Some(n) = episodes {
                cfg.episodes = n;
            }
            let outcome = cmd_train(&cfg, common.out.as_deref(), true)?;
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            n_traj,
            traj_len,
            n_action_samples,
            ode_steps,
        } => {
            let cfg = load(&common)?;
            let settings = EvalSettings {
                n_traj: n_traj.unwrap_or(cfg.evaluate.n_traj),
                traj_len: traj_len.unwrap_or(cfg.evaluate.traj_len),
                n_action_samples: n_action_samples.unwrap_or(cfg.evaluate.n_action_samples),
            };
            let summary = cmd_evaluate(
                &cfg,
                Path::new(&checkpoint),
                settings,
                ode_steps,
                common.out.as_deref(),
                threads(),
            )?;
            println!("{}", flowsac::evaluate::SUMMARY_HEADER);
            println!("{}", summary.csv_line());
        }
        Command::IsfmBench(common) => {
            let cfg = load(&common)?;
            let rows = cmd_isfm_bench(&cfg, common.out.as_deref(), threads())?;
            println!("{}", flowsac::bench::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv_line());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
