mod common;

use common::{micro, Micro};
use datamil::dataset::SubsetMask;
use datamil::estimators::*;
use datamil::policy::{grad_loss, LossKind, PolicyConfig, PolicyParams, WeightedSample};
use datamil::proxy::{grad_proxy, proxy_metric, ProxyConfig};
use datamil::rng::rng_for;
use datamil::stats::spearman;
use datamil::trainer::{train, BatchRecord, Optimizer, TrainConfig, TrainingSet};
use datamil::Error;
use proptest::prelude::*;
use rand::Rng;

fn bits(n: usize, k: usize) -> Vec<bool> {
    (0..n).map(|i| k >> i & 1 == 1).collect()
}

/// Every subset of `n` clusters with the noiseless outcome `zᵀτ*`.
fn planted(n: usize, seed: u64) -> (Vec<f64>, Vec<SubsetOutcome>) {
    let mut r = rng_for(seed, &[1]);
    let tau: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let outcomes = (0..1usize << n)
        .map(|k| {
            let b = bits(n, k);
            let y = tau.iter().zip(&b).filter(|(_, &on)| on).map(|(t, _)| t).sum();
            SubsetOutcome { mask: SubsetMask::binary(&b), outcome: y }
        })
        .collect();
    (tau, outcomes)
}

/// Solves `XᵀX τ = Xᵀy` by Gaussian elimination with partial pivoting.
fn normal_equations_oracle(outcomes: &[SubsetOutcome]) -> Vec<f64> {
    let n = outcomes[0].mask.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for o in outcomes {
        let z = o.mask.weights();
        for i in 0..n {
            for j in 0..n {
                a[i][j] += z[i] * z[j];
            }
            a[i][n] += z[i] * o.outcome;
        }
    }
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

#[test]
fn planted_linear_system_is_recovered() {
    for seed in 0..5 {
        let (truth, outcomes) = planted(6, seed);
        let dm = regression_estimate(&outcomes, Ridge::Absolute(0.0), false).unwrap();
        let oracle = normal_equations_oracle(&outcomes);
        for i in 0..6 {
            assert!((dm.tau[i] - oracle[i]).abs() <= 1e-8, "seed {seed}: {:?} vs {oracle:?}", dm.tau);
            assert!((dm.tau[i] - truth[i]).abs() <= 1e-8);
        }
        let fit = evaluate_datamodel(&dm, &outcomes).unwrap();
        assert!((fit.pearson.unwrap() - 1.0).abs() <= 1e-12);
        assert!(fit.mse <= 1e-16, "{}", fit.mse);
    }
}

#[test]
fn ridge_shrinks_monotonically() {
    let (_, outcomes) = planted(6, 11);
    let norm = |l: f64| {
        let dm = regression_estimate(&outcomes, Ridge::Absolute(l), false).unwrap();
        dm.tau.iter().map(|t| t * t).sum::<f64>().sqrt()
    };
    let (a, b, c) = (norm(0.0), norm(1.0), norm(1e6));
    assert!(a > b && b > c, "{a} {b} {c}");
    assert!(c < 1e-4);
}

#[test]
fn regression_is_permutation_equivariant() {
    let (_, outcomes) = planted(5, 3);
    let perm = [3, 0, 4, 1, 2];
    let permuted: Vec<SubsetOutcome> = outcomes
        .iter()
        .map(|o| SubsetOutcome {
            mask: SubsetMask::binary(&perm.map(|p| o.mask.is_on(p))),
            outcome: o.outcome,
        })
        .collect();
    let a = regression_estimate(&outcomes, Ridge::Absolute(0.5), true).unwrap();
    let b = regression_estimate(&permuted, Ridge::Absolute(0.5), true).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert!((b.tau[i] - a.tau[p]).abs() <= 1e-12);
    }
    assert!((a.offset - b.offset).abs() <= 1e-12);
}

fn datamodel(tau: Vec<f64>, offset: f64) -> Datamodel {
    Datamodel {
        tau,
        offset,
        estimator: EstimatorKind::Regression,
        target: OutcomeTarget::ProxyLoss,
        provenance: Provenance::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn prediction_is_additive_over_disjoint_masks(
        tau in proptest::collection::vec(-4096i32..4096, 1..40),
        offset in -4096i32..4096,
        assign in proptest::collection::vec(0u8..3, 40),
    ) {
        // dyadic values keep every partial sum exact
        let dm = datamodel(tau.iter().map(|&t| t as f64 / 1024.0).collect(), offset as f64 / 1024.0);
        let n = dm.tau.len();
        let m1: Vec<bool> = (0..n).map(|i| assign[i] == 1).collect();
        let m2: Vec<bool> = (0..n).map(|i| assign[i] == 2).collect();
        let both: Vec<bool> = (0..n).map(|i| assign[i] != 0).collect();
        let p = |b: &[bool]| predict(&dm, &SubsetMask::binary(b)).unwrap();
        prop_assert_eq!(p(&both), p(&m1) + p(&m2) - dm.offset);
        prop_assert_eq!(p(&vec![false; n]), dm.offset);
    }
}

fn small_cfg(optimizer: Optimizer, steps: usize) -> TrainConfig {
    TrainConfig {
        policy: PolicyConfig::new(4, 2, vec![8]),
        steps,
        learning_rate: 0.1,
        batch_size: 4,
        optimizer,
        loss: LossKind::Nll,
        seed: 2,
        cotrain: None,
        checkpoint_stride: 1,
    }
}

fn proxy_after(m: &Micro, weights: Vec<f64>, cfg: &TrainConfig, pc: &ProxyConfig) -> f64 {
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let (p, _) = train(&data, &SubsetMask::continuous_unchecked(weights), cfg).unwrap();
    proxy_metric(&p, &m.evaluation_half, pc).unwrap()
}

#[test]
fn one_step_metagradient_is_the_chain_rule() {
    let m = micro(1, 1);
    let cfg = small_cfg(Optimizer::GdFullBatch, 1);
    let pc = ProxyConfig::uniform(LossKind::Nll);
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let dm = metagradient_estimate(&data, &m.evaluation_half, &cfg, &pc).unwrap();

    // θ₁ = θ₀ − η ∇L(θ₀), L = (1/|B|) Σ z_c(i) ℓ_i, so ∂M̂/∂z_c = −η ∇M̂(θ₁)ᵀ ∇L_c(θ₀)
    let theta0 = PolicyParams::init(&cfg.policy, cfg.seed).unwrap();
    let (theta1, _) = train(&data, &SubsetMask::ones(m.clusters.len()), &cfg).unwrap();
    let g_out = grad_proxy(&theta1, &m.evaluation_half, &pc).unwrap();
    for c in 0..m.clusters.len() {
        let batch: Vec<WeightedSample> = m
            .prior
            .iter()
            .enumerate()
            .flat_map(|(t, traj)| traj.pairs().iter().map(move |p| WeightedSample::new(p, if t == c { 1.0 } else { 0.0 })))
            .collect();
        let g_c = grad_loss(&theta0, &batch, LossKind::Nll).unwrap();
        let expected = -cfg.learning_rate * g_out.iter().zip(&g_c).map(|(a, b)| a * b).sum::<f64>();
        assert!((dm.tau[c] - expected).abs() <= 1e-12 * expected.abs().max(1e-6), "cluster {c}: {} vs {expected}", dm.tau[c]);
    }
    let full = proxy_metric(&theta1, &m.evaluation_half, &pc).unwrap();
    assert!((predict(&dm, &SubsetMask::ones(m.clusters.len())).unwrap() - full).abs() <= 1e-12);
}

#[test]
fn metagradient_matches_retraining_differences() {
    let m = micro(1, 1);
    let cfg = small_cfg(Optimizer::GdFullBatch, 20);
    let pc = ProxyConfig::uniform(LossKind::Nll);
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let dm = metagradient_estimate(&data, &m.evaluation_half, &cfg, &pc).unwrap();
    let n = m.clusters.len();
    let delta = 1e-3;
    for i in 0..n {
        let mut up = vec![1.0; n];
        let mut down = vec![1.0; n];
        up[i] += delta;
        down[i] -= delta;
        let fd = (proxy_after(&m, up, &cfg, &pc) - proxy_after(&m, down, &cfg, &pc)) / (2.0 * delta);
        let err = (dm.tau[i] - fd).abs();
        if dm.tau[i].abs() < 1e-5 {
            assert!(err <= 1e-8, "cluster {i}: {} vs {fd}", dm.tau[i]);
        } else {
            assert!(err / dm.tau[i].abs() <= 1e-3, "cluster {i}: {} vs {fd}", dm.tau[i]);
        }
    }
}

#[test]
fn metagradient_is_first_order_accurate() {
    let m = micro(1, 1);
    let cfg = small_cfg(Optimizer::GdFullBatch, 20);
    let pc = ProxyConfig::uniform(LossKind::Nll);
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let dm = metagradient_estimate(&data, &m.evaluation_half, &cfg, &pc).unwrap();
    let n = m.clusters.len();
    let base = proxy_after(&m, vec![1.0; n], &cfg, &pc);
    let i = (0..n).max_by(|&a, &b| dm.tau[a].abs().total_cmp(&dm.tau[b].abs())).unwrap();
    let err = |delta: f64| {
        let mut z = vec![1.0; n];
        z[i] += delta;
        (proxy_after(&m, z, &cfg, &pc) - base - delta * dm.tau[i]).abs()
    };
    // a 10× smaller step shrinks a second-order remainder about 100×
    let ratio = err(1e-2) / err(1e-3);
    assert!((30.0..300.0).contains(&ratio), "{ratio}");
}

#[test]
fn unseen_clusters_get_zero_influence_under_sgd() {
    let m = micro(1, 3);
    let cfg = small_cfg(Optimizer::Sgd, 3);
    let pc = ProxyConfig::uniform(LossKind::Nll);
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let dm = metagradient_estimate(&data, &m.evaluation_half, &cfg, &pc).unwrap();
    let (_, tape) = train(&data, &SubsetMask::ones(m.clusters.len()).to_continuous(), &cfg).unwrap();
    // pool indices run through the clusters in order
    let mut owner = Vec::new();
    for (c, t) in m.prior.iter().enumerate() {
        owner.extend(std::iter::repeat_n(c, t.len()));
    }
    let mut seen = vec![false; m.clusters.len()];
    for b in &tape.batches {
        let BatchRecord::Sampled(idx) = b else { unreachable!() };
        for &i in idx {
            seen[owner[i as usize]] = true;
        }
    }
    let unseen: Vec<usize> = (0..seen.len()).filter(|&c| !seen[c]).collect();
    assert!(!unseen.is_empty());
    for c in unseen {
        assert_eq!(dm.tau[c], 0.0);
    }
    assert!(seen.iter().zip(&dm.tau).any(|(&s, &t)| s && t != 0.0));
}

#[test]
fn metagradient_rejects_adam() {
    let m = micro(1, 1);
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let r = metagradient_estimate(&data, &m.evaluation_half, &small_cfg(Optimizer::adam(), 2), &ProxyConfig::uniform(LossKind::Nll));
    assert!(matches!(r, Err(Error::Unsupported(_))));
}

#[test]
fn outcome_collection_contracts() {
    let m = micro(1, 1);
    let cfg = small_cfg(Optimizer::GdFullBatch, 10);
    let pc = ProxyConfig::uniform(LossKind::Nll);
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let eval = Evaluator::Proxy { target_eval: &m.evaluation_half, cfg: &pc };
    let n = m.clusters.len();
    let all = collect_outcomes_for_masks(&data, vec![SubsetMask::ones(n)], &cfg, &eval).unwrap();
    let (p, _) = train(&data, &SubsetMask::ones(n), &cfg).unwrap();
    assert_eq!(all.outcomes[0].outcome, proxy_metric(&p, &m.evaluation_half, &pc).unwrap());
    let a = collect_outcomes(&data, 12, 0.5, &cfg, &eval, 5).unwrap();
    let b = collect_outcomes(&data, 12, 0.5, &cfg, &eval, 5).unwrap();
    assert_eq!(a.outcomes, b.outcomes);
    assert_eq!(a.outcomes.len() + a.skipped, 12);
}

#[test]
fn metagradient_and_regression_rank_clusters_alike() {
    let m = micro(2, 3);
    let cfg = small_cfg(Optimizer::GdFullBatch, 50);
    let pc = ProxyConfig::uniform(LossKind::Nll);
    let data = TrainingSet::new(&m.prior, &m.clusters, &[]);
    let eval = Evaluator::Proxy { target_eval: &m.evaluation_half, cfg: &pc };
    let outs = collect_outcomes(&data, 300, 0.5, &cfg, &eval, 0).unwrap();
    let reg = regression_estimate(&outs.outcomes, Ridge::TraceNormalized(1e-3), true).unwrap();
    let meta = metagradient_estimate(&data, &m.evaluation_half, &cfg, &pc).unwrap();
    let rho = spearman(&reg.tau, &meta.tau).unwrap();
    assert!(rho > 0.0, "{rho}");
}
