//! Fits a linear datamodel by ridge regression on proxy outcomes of
//! Bernoulli-½ subsets, then checks it on held-out subsets.

use datamil::dataset::{make_clusters, split_target, Granularity};
use datamil::estimators::{collect_outcomes, evaluate_datamodel, regression_estimate, Evaluator, Ridge};
use datamil::policy::{LossKind, PolicyConfig};
use datamil::proxy::ProxyConfig;
use datamil::toyenv::{generate_prior, generate_target, EnvSpec, ObsMode, ACTION_DIM, OBS_DIM};
use datamil::trainer::{Optimizer, TrainConfig, TrainingSet};

fn main() -> datamil::Result<()> {
    let spec = EnvSpec { obs_mode: ObsMode::NoGoal, ..EnvSpec::default() };
    let prior = generate_prior(&spec, 1, 2, 0.5, 0)?;
    let target = generate_target(&spec, 0, 5, prior.len(), 0)?;
    let split = split_target(&target, 0)?;
    let clusters = make_clusters(&prior, Granularity::Trajectory)?;
    let data = TrainingSet::new(&prior, &clusters, &[]);
    let cfg = TrainConfig {
        policy: PolicyConfig::new(OBS_DIM, ACTION_DIM, vec![16, 16]),
        steps: 200,
        learning_rate: 0.2,
        batch_size: 0,
        optimizer: Optimizer::GdFullBatch,
        loss: LossKind::Nll,
        seed: 1,
        cotrain: None,
        checkpoint_stride: 1000,
    };
    let proxy = ProxyConfig::uniform(LossKind::Nll);
    let eval = Evaluator::Proxy { target_eval: &split.evaluation_half, cfg: &proxy };

    let train_set = collect_outcomes(&data, 120, 0.5, &cfg, &eval, 0)?;
    let heldout = collect_outcomes(&data, 30, 0.5, &cfg, &eval, 1)?;
    println!("{} + {} subset trainings in {:.1}s", train_set.outcomes.len(), heldout.outcomes.len(), train_set.seconds + heldout.seconds);

    let dm = regression_estimate(&train_set.outcomes, Ridge::TraceNormalized(1e-3), true)?;
    let fit = evaluate_datamodel(&dm, &heldout.outcomes)?;
    println!("held-out spearman {:.3}, pearson {:.3}", fit.spearman.unwrap_or(f64::NAN), fit.pearson.unwrap_or(f64::NAN));

    let mut order: Vec<usize> = (0..dm.tau.len()).collect();
    order.sort_by(|&a, &b| dm.tau[b].total_cmp(&dm.tau[a]));
    for &i in order.iter().take(5) {
        let t = &prior[clusters[i].span.traj_id];
        println!("  cluster {i:>2}: task {} {:<10} τ = {:+.4}", t.task_id, t.source_tag.as_str(), dm.tau[i]);
    }
    Ok(())
}
