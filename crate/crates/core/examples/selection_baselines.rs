//! Similarity-based retrieval (states, actions, both) and random selection,
//! with the task and quality mix of what each one picks.

use datamil::dataset::{make_clusters, Granularity, SourceTag, Trajectory};
use datamil::selection::{random_select, select_top_fraction, similarity_scores, SelectionConfig, SimilarityConfig, SimilarityMode};
use datamil::toyenv::{generate_prior, generate_target, EnvSpec, ObsMode};

fn describe(name: &str, prior: &[Trajectory], picked: &[usize]) {
    let on_task = picked.iter().filter(|&&i| prior[i].task_id == 0).count();
    let noisy = picked.iter().filter(|&&i| prior[i].source_tag == SourceTag::Suboptimal).count();
    println!("{name:<7} {:>3} picked, {on_task:>2} from task 0, {noisy:>2} suboptimal", picked.len());
}

fn main() -> datamil::Result<()> {
    let spec = EnvSpec { obs_mode: ObsMode::NoGoal, ..EnvSpec::default() };
    let prior = generate_prior(&spec, 5, 15, 0.5, 0)?;
    let target = generate_target(&spec, 0, 5, prior.len(), 0)?;
    // one cluster per trajectory, so cluster ids index the prior
    let clusters = make_clusters(&prior, Granularity::Trajectory)?;
    let sel = SelectionConfig { fraction: 0.1, require_positive: false };

    for (name, mode) in [("states", SimilarityMode::SR), ("actions", SimilarityMode::AR), ("both", SimilarityMode::BR)] {
        let scores = similarity_scores(&prior, &clusters, &target, &SimilarityConfig::new(mode))?;
        describe(name, &prior, &select_top_fraction(&scores, &sel)?);
    }
    describe("random", &prior, &random_select(clusters.len(), 0.1, 0)?);
    Ok(())
}
