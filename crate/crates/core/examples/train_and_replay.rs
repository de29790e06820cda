//! Trains a behavior-cloning policy on a cluster subset co-trained with
//! target demos, then rebuilds it bit for bit from its recorded tape.

use datamil::dataset::{make_clusters, Granularity, SubsetMask};
use datamil::policy::{LossKind, PolicyConfig};
use datamil::toyenv::{generate_prior, generate_target, rollout_success_rate, EnvSpec, ObsMode, ACTION_DIM, OBS_DIM};
use datamil::trainer::{replay, train, CoTrain, Optimizer, TrainConfig, TrainingSet, TrainingTape};

fn main() -> datamil::Result<()> {
    let spec = EnvSpec { obs_mode: ObsMode::NoGoal, ..EnvSpec::default() };
    let prior = generate_prior(&spec, 2, 2, 0.5, 0)?;
    let target = generate_target(&spec, 0, 5, prior.len(), 0)?;
    let clusters = make_clusters(&prior, Granularity::Trajectory)?;
    let data = TrainingSet::new(&prior, &clusters, &target);

    let cfg = TrainConfig {
        policy: PolicyConfig::new(OBS_DIM, ACTION_DIM, vec![32, 32]),
        steps: 1500,
        learning_rate: 1e-3,
        batch_size: 64,
        optimizer: Optimizer::adam(),
        loss: LossKind::Nll,
        seed: 1,
        cotrain: Some(CoTrain { alpha: 0.5 }),
        checkpoint_stride: 100,
    };
    let task0: Vec<usize> = clusters.iter().filter(|c| prior[c.span.traj_id].task_id == 0).map(|c| c.cluster_id).collect();
    let mask = SubsetMask::from_selected(clusters.len(), &task0)?;
    let (params, tape) = train(&data, &mask, &cfg)?;
    println!("trained on clusters {task0:?} plus target demos for {} steps", tape.steps());
    println!("task-0 success over 50 rollouts: {:.2}", rollout_success_rate(&params, &spec, 0, 50, 0)?);

    let path = std::env::temp_dir().join("datamil_example_tape.json");
    tape.save(&path)?;
    let replayed = replay(&TrainingTape::load(&path)?, &data)?;
    println!("replay from {} reproduces the parameters exactly: {}", path.display(), replayed == params);
    Ok(())
}
