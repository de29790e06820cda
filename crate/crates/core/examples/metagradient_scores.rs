//! Cluster influence by differentiating the proxy through the whole
//! training run, from a single training and its reverse pass.

use datamil::dataset::{make_clusters, split_target, Granularity};
use datamil::estimators::metagradient_estimate;
use datamil::policy::{LossKind, PolicyConfig};
use datamil::proxy::ProxyConfig;
use datamil::toyenv::{generate_prior, generate_target, EnvSpec, ObsMode, ACTION_DIM, OBS_DIM};
use datamil::trainer::{Optimizer, TrainConfig, TrainingSet};

fn main() -> datamil::Result<()> {
    let spec = EnvSpec { obs_mode: ObsMode::NoGoal, ..EnvSpec::default() };
    let prior = generate_prior(&spec, 5, 15, 0.5, 0)?;
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
        checkpoint_stride: 1,
    };

    let start = std::time::Instant::now();
    let dm = metagradient_estimate(&data, &split.evaluation_half, &cfg, &ProxyConfig::uniform(LossKind::Nll))?;
    println!("{} cluster scores in {:.1}s (offset {:.3})", dm.tau.len(), start.elapsed().as_secs_f64(), dm.offset);

    let mut order: Vec<usize> = (0..dm.tau.len()).collect();
    order.sort_by(|&a, &b| dm.tau[b].total_cmp(&dm.tau[a]));
    println!("top 10:");
    for &i in order.iter().take(10) {
        let t = &prior[clusters[i].span.traj_id];
        println!("  task {} {:<10} τ = {:+.5}", t.task_id, t.source_tag.as_str(), dm.tau[i]);
    }
    let worst = order[order.len() - 1];
    let t = &prior[clusters[worst].span.traj_id];
    println!("most harmful: task {} {} τ = {:+.5}", t.task_id, t.source_tag.as_str(), dm.tau[worst]);
    Ok(())
}
