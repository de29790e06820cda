use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use datamil::config::RunConfig;
use datamil::harness;

#[derive(Parser)]
#[command(name = "datamil", version, about = "Datamodel-based data selection on a toy multi-task environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set select.fraction=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Parent directory of the run directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the prior and target datasets.
    GenData(Common),
    /// Fit the datamodel and the similarity baselines' scores.
    Estimate(Common),
    /// Turn scores into one selection per configured method.
    Select(Common),
    /// Train and evaluate a final policy per selection.
    TrainEval(Common),
    /// Compare the proxy metric with rollout success over random subsets.
    ProxyStudy(Common),
    /// Assemble and print the run report.
    Report(Common),
}

fn load(common: &Common) -> datamil::Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(out) = &common.out {
        overrides.push(format!("out_dir={:?}", out.display().to_string()));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> datamil::Result<()> {
    match cli.command {
        Command::GenData(c) => println!("{}", harness::cmd_gen_data(&load(&c)?)?.display()),
        Command::Estimate(c) => println!("{}", harness::cmd_estimate(&load(&c)?)?.display()),
        Command::Select(c) => {
            for sel in harness::cmd_select(&load(&c)?)? {
                println!("{}: {} clusters", sel.method.as_str(), sel.cluster_ids.len());
            }
        }
        Command::TrainEval(c) => println!("{}", harness::cmd_train_eval(&load(&c)?)?.display()),
        Command::ProxyStudy(c) => println!("{}", harness::cmd_proxy_study(&load(&c)?)?.display()),
        Command::Report(c) => {
            let path = harness::cmd_report(&load(&c)?)?;
            print!("{}", harness::render_report(&harness::load_report(&path)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
