//! Generates the toy prior and target data, partitions the prior into
//! clusters at each granularity, and draws Bernoulli subset masks.

use datamil::dataset::{load_trajectories, make_clusters, sample_bernoulli_mask, save_trajectories, split_target, Granularity, SourceTag};
use datamil::toyenv::{generate_prior, generate_target, replay_success, EnvSpec, ObsMode};

fn main() -> datamil::Result<()> {
    let spec = EnvSpec { obs_mode: ObsMode::NoGoal, ..EnvSpec::default() };
    let prior = generate_prior(&spec, 5, 15, 0.5, 0)?;
    let target = generate_target(&spec, 0, 5, prior.len(), 0)?;

    let pairs: usize = prior.iter().map(|t| t.len()).sum();
    println!("prior: {} trajectories, {pairs} pairs; target: {} demos of task 0", prior.len(), target.len());
    for tag in [SourceTag::Expert, SourceTag::Suboptimal] {
        let of_tag: Vec<_> = prior.iter().filter(|t| t.source_tag == tag).collect();
        let ok = of_tag.iter().filter(|t| replay_success(&spec, t)).count();
        println!("  {:<10} {:>3} trajectories, {ok} reach their goal on replay", tag.as_str(), of_tag.len());
    }

    for g in [Granularity::Trajectory, Granularity::Subtrajectory { horizon: 10 }, Granularity::Pair] {
        println!("{g:?}: {} clusters", make_clusters(&prior, g)?.len());
    }

    let split = split_target(&target, 0)?;
    println!("target split: {} for estimation, {} for evaluation", split.estimation_half.len(), split.evaluation_half.len());

    let n = make_clusters(&prior, Granularity::Trajectory)?.len();
    for seed in 0..3 {
        let m = sample_bernoulli_mask(n, 0.5, seed)?;
        println!("mask seed {seed}: {} of {n} clusters on", m.count_on());
    }

    let path = std::env::temp_dir().join("datamil_example_target.jsonl");
    save_trajectories(&target, &path)?;
    assert_eq!(load_trajectories(&path)?, target);
    println!("round-tripped target demos through {}", path.display());
    Ok(())
}
