mod common;

use datamil::dataset::SourceTag;
use datamil::toyenv::*;
use serde_json::json;

#[test]
fn dynamics_examples() {
    let s = EnvSpec::default();
    assert_eq!(env_step(&s, [0.0, 0.0], &[1.0, 0.0]), [0.1, 0.0]);
    assert_eq!(env_step(&s, [0.0, 0.0], &[10.0, 0.0]), [0.1, 0.0]);
    assert_eq!(env_step(&s, [0.5, -0.5], &[0.0, 0.0]), [0.5, -0.5]);
    assert_eq!(expert_action(&s, [1.0, 0.0], [1.0, 0.0]), [0.0, 0.0]);
    assert_eq!(expert_action(&s, [0.0, 0.0], [1.0, 0.0]), [1.0, 0.0]);
    let a = expert_action(&s, [0.99, 0.0], [1.0, 0.0]);
    assert!((a[0] - 0.05).abs() < 1e-12 && a[1] == 0.0);
}

#[test]
fn expert_reaches_every_goal_from_a_start_grid() {
    let s = EnvSpec::default();
    for task in 0..s.num_tasks {
        let expert = ScriptedExpert { spec: s.clone(), goal: s.goal(task) };
        for i in 0..9 {
            for j in 0..9 {
                let start = [-1.0 + 0.25 * i as f64, -1.0 + 0.25 * j as f64];
                let r = rollout(&expert, &s, task, start);
                assert!(r.success, "task {task} from {start:?}: {r:?}");
                assert!(r.final_distance < s.success_radius);
            }
        }
        assert_eq!(rollout_success_rate(&expert, &s, task, 20, 3).unwrap(), 1.0);
    }
}

#[test]
fn generated_trajectories_replay_exactly() {
    for obs_mode in [ObsMode::GoalConditioned, ObsMode::NoGoal] {
        let s = EnvSpec { obs_mode, ..EnvSpec::default() };
        let prior = generate_prior(&s, 5, 3, 0.5, 0).unwrap();
        assert_eq!(prior.len(), 8 * 8);
        for t in &prior {
            let pos = replay_positions(&s, t);
            for (p, pair) in pos.iter().zip(t.pairs()) {
                assert!((p[0] - pair.state[0]).abs() <= 1e-12 && (p[1] - pair.state[1]).abs() <= 1e-12);
            }
            if t.source_tag == SourceTag::Expert {
                assert!(replay_success(&s, t), "expert trajectory {} fails", t.traj_id);
                let goal = s.goal(t.task_id);
                let d: Vec<f64> = pos.iter().map(|&p| distance(p, goal)).collect();
                assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-15), "expert {} moves away", t.traj_id);
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let s = EnvSpec::default();
    assert_eq!(generate_prior(&s, 2, 2, 0.5, 7).unwrap(), generate_prior(&s, 2, 2, 0.5, 7).unwrap());
    let no_noise = generate_prior(&s, 2, 0, 0.5, 7).unwrap();
    assert!(no_noise.iter().all(|t| t.source_tag == SourceTag::Expert));
    assert_eq!(no_noise.len(), 16);
}

#[test]
fn noisy_data_succeeds_less_often_than_expert_data() {
    let s = EnvSpec::default();
    let prior = generate_prior(&s, 5, 15, 0.5, 0).unwrap();
    let rate = |tag| {
        let ts: Vec<_> = prior.iter().filter(|t| t.source_tag == tag).collect();
        ts.iter().filter(|t| replay_success(&s, t)).count() as f64 / ts.len() as f64
    };
    let (expert, noisy) = (rate(SourceTag::Expert), rate(SourceTag::Suboptimal));
    assert_eq!(expert, 1.0);
    assert!(noisy < expert, "noisy {noisy} vs expert {expert}");
}

#[test]
fn zero_policy_success() {
    let s = EnvSpec::default();
    assert!(rollout(&ZeroPolicy, &s, 0, s.goal(0)).success);
    let rate = rollout_success_rate(&ZeroPolicy, &s, 0, 100, 0).unwrap();
    // half of the success disc around goal (1, 0) lies in the start box:
    // π·0.1²/2 over an area of 4, about 0.004
    assert!(rate <= 0.05, "{rate}");
    common::check_fixture("zero_policy_success", &json!({ "task": 0, "n_rollouts": 100, "seed": 0, "rate": rate }));
}
