//! `riskmbrl` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 oracle suite failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use riskmbrl::experiment::{
    cmd_evaluate, cmd_gen_data, cmd_reproduce_fig2, cmd_train, force_single_thread, ExperimentConfig, TrainOptions,
};
use riskmbrl::{oracle, Error, RiskSpec};

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;
const SUITE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "riskmbrl", version, about = "Risk-averse model-based offline RL experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// neutral, cvar:A or wang:E
    #[arg(long, global = true, value_name = "SPEC")]
    risk: Option<RiskSpec>,
    /// Train on a single dynamics model.
    #[arg(long, global = true)]
    ablate_ensemble: bool,
    #[arg(long, global = true)]
    single_thread: bool,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the offline dataset.
    GenData,
    /// Fit the ensemble and train the agent.
    Train,
    /// Evaluate an agent checkpoint.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Report path (defaults to <out>/report.json).
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Sweep the one-step illustrative MDP and write its value curves.
    ReproduceFig2,
    /// Run the built-in oracle suites.
    OracleTests {
        /// Rank CVaR samples best-first (negative control).
        #[arg(long, hide = true)]
        inject_sort_fault: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter { .. } => USAGE,
        _ => RUNTIME,
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), std::env::vars())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(r) = common.risk {
        cfg.rollout.risk = r;
    }
    if common.ablate_ensemble {
        cfg.train.ablate_ensemble = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Error> {
    if cli.common.single_thread {
        force_single_thread();
    }
    if let Command::OracleTests { inject_sort_fault } = cli.command {
        riskmbrl::risk::set_cvar_sort_fault(inject_sort_fault);
        let seed = cli.common.seed.unwrap_or(0);
        let results = oracle::run_all(seed);
        print!("{}", oracle::format_table(&results));
        return Ok(if results.iter().all(|r| r.passed) { 0 } else { SUITE });
    }
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let path = cmd_gen_data(&cfg, cli.common.force)?;
            println!("{}", path.display());
        }
        Command::Train => {
            let fin = cmd_train(
                &cfg,
                TrainOptions {
                    resume: cli.common.resume,
                    force: cli.common.force,
                },
            )?;
            let a = &fin.aggregate;
            println!(
                "normalized mean {:.1}  normalized CVaR_{} {:.1}  (raw mean {:.2}, raw CVaR {:.2})",
                a.normalized_mean, cfg.eval.alpha, a.normalized_cvar, a.mean, a.cvar
            );
        }
        Command::Evaluate { checkpoint, report } => {
            let r = cmd_evaluate(&cfg, &checkpoint, report.as_deref())?;
            println!(
                "{} episodes: normalized mean {:.1}  normalized CVaR_{} {:.1}",
                r.episodes, r.normalized_mean, r.alpha, r.normalized_cvar
            );
        }
        Command::ReproduceFig2 => {
            let r = cmd_reproduce_fig2(&cfg)?;
            println!("neutral argmax {:+.3} (outside data: {})", r.neutral_argmax, r.neutral_argmax_outside());
            println!("CVaR argmax    {:+.3} (inside data: {})", r.cvar_argmax, r.cvar_argmax_inside());
            println!("safe beats spike under CVaR only: {}", r.safe_beats_spike());
        }
        Command::OracleTests { .. } => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
