//! The whole experiment on a reduced configuration: data, datamodel,
//! selections, final policies and the report, in a temporary run directory.
//! Pass `--full` for the shipped configuration (a few minutes).

use datamil::config::RunConfig;
use datamil::harness::{render_report, run_pipeline};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = tempfile::tempdir()?;
    let mut overrides = vec![format!("out_dir={:?}", out.path().display().to_string())];
    if !std::env::args().any(|a| a == "--full") {
        overrides.extend(
            [
                "data.n_expert_per_task=2",
                "data.n_noisy_per_task=4",
                "estimate.train.steps=100",
                "final.train_seeds=[1]",
                "final.train.steps=1500",
                "final.eval_rollouts=50",
            ]
            .map(String::from),
        );
    }
    let cfg = RunConfig::load(None, &overrides)?;
    let report = run_pipeline(&cfg)?;
    print!("{}", render_report(&report));
    Ok(())
}
