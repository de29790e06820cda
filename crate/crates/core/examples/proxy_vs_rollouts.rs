//! The rollout-free proxy (negative held-out BC loss) next to real rollout
//! success, for policies trained on different slices of the prior.

use datamil::dataset::{make_clusters, split_target, Granularity, SourceTag, SubsetMask};
use datamil::policy::{LossKind, PolicyConfig};
use datamil::proxy::{proxy_metric, ProxyConfig};
use datamil::toyenv::{generate_prior, generate_target, rollout_success_rate, EnvSpec, ObsMode, ACTION_DIM, OBS_DIM};
use datamil::trainer::{train, CoTrain, Optimizer, TrainConfig, TrainingSet};

fn main() -> datamil::Result<()> {
    let spec = EnvSpec { obs_mode: ObsMode::NoGoal, ..EnvSpec::default() };
    let prior = generate_prior(&spec, 3, 3, 0.5, 0)?;
    let target = generate_target(&spec, 0, 5, prior.len(), 0)?;
    let split = split_target(&target, 0)?;
    let clusters = make_clusters(&prior, Granularity::Trajectory)?;
    let data = TrainingSet::new(&prior, &clusters, &split.estimation_half);
    let proxy = ProxyConfig::uniform(LossKind::Nll);
    let cfg = TrainConfig {
        policy: PolicyConfig::new(OBS_DIM, ACTION_DIM, vec![32, 32]),
        steps: 1500,
        learning_rate: 1e-3,
        batch_size: 64,
        optimizer: Optimizer::adam(),
        loss: LossKind::Nll,
        seed: 1,
        cotrain: Some(CoTrain { alpha: 0.5 }),
        checkpoint_stride: 1000,
    };

    let pick = |keep: &dyn Fn(usize, SourceTag) -> bool| -> Vec<usize> {
        clusters.iter().filter(|c| {
            let t = &prior[c.span.traj_id];
            keep(t.task_id, t.source_tag)
        }).map(|c| c.cluster_id).collect()
    };
    let subsets = [
        ("task-0 experts", pick(&|k, s| k == 0 && s == SourceTag::Expert)),
        ("task-0 all", pick(&|k, _| k == 0)),
        ("tasks 3-5", pick(&|k, _| (3..=5).contains(&k))),
        ("everything", pick(&|_, _| true)),
    ];
    println!("{:<16} {:>10} {:>9}", "subset", "proxy", "success");
    for (name, ids) in subsets {
        let (params, _) = train(&data, &SubsetMask::from_selected(clusters.len(), &ids)?, &cfg)?;
        let m_hat = proxy_metric(&params, &split.evaluation_half, &proxy)?;
        let m = rollout_success_rate(&params, &spec, 0, 100, 0)?;
        println!("{name:<16} {m_hat:>10.3} {m:>9.2}");
    }
    Ok(())
}
