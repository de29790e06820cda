mod common;

use std::collections::HashSet;
use std::io::Write;

use datamil::dataset::*;
use datamil::Error;
use proptest::prelude::*;
use serde_json::json;

fn arb_trajectory(id: usize) -> impl Strategy<Value = Trajectory> {
    (1usize..40, 0usize..8, 0usize..3, any::<u64>()).prop_map(move |(len, task, tag, salt)| {
        let tag = [SourceTag::Expert, SourceTag::Suboptimal, SourceTag::Target][tag];
        // values exercise full-precision rendering
        let v = |i: usize, k: usize| ((salt.wrapping_add((i * 7 + k) as u64) % 10_007) as f64).sqrt() / 3.0 - 17.0;
        let states = (0..len).map(|i| (0..4).map(|k| v(i, k)).collect()).collect();
        let actions = (0..len).map(|i| (0..2).map(|k| -v(i, k + 9) / 7.0).collect()).collect();
        Trajectory::new(id, task, tag, states, actions).unwrap()
    })
}

fn arb_dataset() -> impl Strategy<Value = Vec<Trajectory>> {
    (1usize..8).prop_flat_map(|n| (0..n).map(|i| arb_trajectory(i * 3 + 1)).collect::<Vec<_>>())
}

fn arb_granularity() -> impl Strategy<Value = Granularity> {
    prop_oneof![
        Just(Granularity::Trajectory),
        Just(Granularity::Pair),
        (1usize..20).prop_map(|horizon| Granularity::Subtrajectory { horizon }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn clusters_partition_every_pair(data in arb_dataset(), g in arb_granularity()) {
        let clusters = make_clusters(&data, g).unwrap();
        let ids: Vec<usize> = clusters.iter().map(|c| c.cluster_id).collect();
        prop_assert_eq!(ids, (0..clusters.len()).collect::<Vec<_>>());
        let mut covered: Vec<(usize, usize)> = clusters
            .iter()
            .flat_map(|c| (c.span.start..c.span.start + c.span.len).map(move |s| (c.span.traj_id, s)))
            .collect();
        let mut expected: Vec<(usize, usize)> = data
            .iter()
            .flat_map(|t| t.pairs().iter().map(|p| (p.traj_id, p.step_idx)))
            .collect();
        prop_assert!(clusters.iter().all(|c| c.span.len > 0));
        covered.sort();
        expected.sort();
        // equal as multisets: every pair exactly once
        prop_assert_eq!(covered, expected);
    }

    #[test]
    fn trajectory_files_round_trip(data in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_trajectories(&data, &path).unwrap();
        prop_assert_eq!(load_trajectories(&path).unwrap(), data);
    }

    #[test]
    fn mask_files_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..50)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = SubsetMask::binary(&bits);
        m.save(&path).unwrap();
        prop_assert_eq!(SubsetMask::load(&path).unwrap(), m);
    }

    #[test]
    fn split_halves_partition_target(n in 2usize..20, seed in any::<u64>()) {
        let target: Vec<Trajectory> = (0..n)
            .map(|i| Trajectory::new(i, 0, SourceTag::Target, vec![vec![i as f64]], vec![vec![0.0]]).unwrap())
            .collect();
        let s = split_target(&target, seed).unwrap();
        let a: HashSet<usize> = s.estimation_half.iter().map(|t| t.traj_id).collect();
        let b: HashSet<usize> = s.evaluation_half.iter().map(|t| t.traj_id).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert!(a.len().abs_diff(b.len()) <= 1);
        prop_assert_eq!(split_target(&target, seed).unwrap(), s);
    }
}

#[test]
fn subtrajectory_remainder_is_kept() {
    let t = Trajectory::new(0, 0, SourceTag::Expert, vec![vec![0.0]; 50], vec![vec![0.0]; 50]).unwrap();
    let sizes: Vec<usize> = make_clusters(std::slice::from_ref(&t), Granularity::Subtrajectory { horizon: 15 })
        .unwrap()
        .iter()
        .map(|c| c.span.len)
        .collect();
    assert_eq!(sizes, [15, 15, 15, 5]);
    let t15 = Trajectory::new(0, 0, SourceTag::Expert, vec![vec![0.0]; 15], vec![vec![0.0]; 15]).unwrap();
    assert_eq!(make_clusters(&[t15], Granularity::Subtrajectory { horizon: 15 }).unwrap().len(), 1);
}

#[test]
fn loader_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"traj_id":0,"task_id":0,"source_tag":"expert","states":[[0.0]],"actions":[[1.0,2.0]]}"#,
            "\n",
            r#"{"traj_id":1,"task_id":0,"source_tag":"expert","states":[[0.0]],"actions":[[1.0,2.0,3.0]]}"#,
            "\n"
        ),
    )
    .unwrap();
    match load_trajectories(&path) {
        Err(Error::DimensionMismatch { line, what, .. }) => assert_eq!((line, what), (2, "action")),
        other => panic!("expected a dimension mismatch, got {other:?}"),
    }

    let good = vec![Trajectory::new(4, 1, SourceTag::Suboptimal, vec![vec![0.5]; 3], vec![vec![0.25]; 3]).unwrap()];
    save_trajectories(&good, &path).unwrap();
    assert_eq!(load_trajectories(&path).unwrap()[0].len(), 3);
    writeln!(std::fs::OpenOptions::new().append(true).open(&path).unwrap(), "not json").unwrap();
    assert!(matches!(load_trajectories(&path), Err(Error::Parse { line: 2, .. })));

    save_trajectories(&[], &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    assert!(load_trajectories(&path).unwrap().is_empty());
}

#[test]
fn distinct_seeds_give_distinct_masks() {
    let masks: HashSet<Vec<bool>> = (0..100)
        .map(|s| {
            let m = sample_bernoulli_mask(64, 0.5, s).unwrap();
            (0..64).map(|i| m.is_on(i)).collect()
        })
        .collect();
    assert_eq!(masks.len(), 100);
    assert_eq!(sample_bernoulli_mask(4, 0.5, 9).unwrap(), sample_bernoulli_mask(4, 0.5, 9).unwrap());
    assert!(sample_bernoulli_mask(4, 1.0, 9).is_err());
}

#[test]
fn bernoulli_count_fixture() {
    let ones = sample_bernoulli_mask(10_000, 0.5, 0).unwrap().count_on();
    let frac = ones as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&frac), "{frac}");
    common::check_fixture("bernoulli_10000", &json!({ "n": 10_000, "p": 0.5, "seed": 0, "ones": ones }));
}
