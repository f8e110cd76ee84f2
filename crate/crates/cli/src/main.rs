use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdm_cli::commands;
use sdm_cli::{CliError, Config, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "sdm-embstore",
    version,
    about = "Tiered-memory embedding store"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a workload through the engine and report latency, hit rates and IOPS.
    Bench(Common),
    /// Generate a synthetic trace for the configured model.
    GenTrace(Common),
    /// Temporal and spatial locality of a trace.
    Analyze(Common),
    /// Fleet power, warmup, IOPS and endurance from closed-form models.
    Plan(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    queries: Option<u64>,
    /// Device profile: nand or optane.
    #[arg(long)]
    profile: Option<String>,
    /// Placement policy: sm_only or fixed_fm.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    fm_budget_bytes: Option<u64>,
    /// Shortest sequence admitted to the pooled cache.
    #[arg(long)]
    len_threshold: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_parser = parse_bool)]
    deprune: Option<bool>,
    /// seq or overlap.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn parse_bool(s: &str) -> Result<bool, String> {
    sdm_cli::config::parse_flag(s).ok_or_else(|| format!("expected a boolean, got `{s}`"))
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            queries: self.queries,
            profile: self.profile.clone(),
            policy: self.policy.clone(),
            fm_budget_bytes: self.fm_budget_bytes,
            len_threshold: self.len_threshold,
            deprune: self.deprune,
            mode: self.mode.clone(),
            out: self.out.clone(),
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Bench(c) => {
            let rc = RunConfig::from_config(&Config::read(&c.config)?, &c.overrides())?;
            let report = commands::cmd_bench(&rc)?;
            print!("{}", report.to_text());
        }
        Cmd::GenTrace(c) => {
            let rc = RunConfig::from_config(&Config::read(&c.config)?, &c.overrides())?;
            let trace = commands::cmd_gen_trace(&rc)?;
            println!(
                "{} queries, {} lookups over {} tables",
                trace.records.len(),
                trace.total_lookups(),
                trace.tables.len()
            );
        }
        Cmd::Analyze(c) => {
            let rc = RunConfig::from_config(&Config::read(&c.config)?, &c.overrides())?;
            print!("{}", commands::cmd_analyze(&rc)?.to_text());
        }
        Cmd::Plan(c) => {
            let report = commands::cmd_plan(&Config::read(&c.config)?, &c.overrides())?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SDM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
