#![allow(dead_code)]

use datamil::dataset::{make_clusters, split_target, Cluster, Granularity, StateActionPair, SubsetMask, Trajectory};
use datamil::policy::{grad_loss, hvp_loss, sample_loss, LossKind, PolicyConfig, PolicyParams, WeightedSample};
use datamil::rng::rng_for;
use datamil::toyenv::{generate_prior, generate_target, EnvSpec, ObsMode, ACTION_DIM, OBS_DIM};
use datamil::trainer::{train, BatchRecord, CoTrain, Optimizer, TrainConfig, TrainingSet};
use rand::Rng;

/// Largest mismatch between two vectors, as a relative error against the
/// larger magnitude of each pair. Entries where both sides are below `floor`
/// in absolute difference count as exact.
pub fn max_rel_err(analytic: &[f64], oracle: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), oracle.len());
    analytic
        .iter()
        .zip(oracle)
        .map(|(a, o)| {
            let d = (a - o).abs();
            if d <= floor {
                0.0
            } else {
                d / a.abs().max(o.abs())
            }
        })
        .fold(0.0, f64::max)
}

pub struct Batch {
    pub pairs: Vec<StateActionPair>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn samples(&self) -> Vec<WeightedSample<'_>> {
        self.pairs.iter().zip(&self.weights).map(|(p, &w)| WeightedSample::new(p, w)).collect()
    }
}

/// Random pairs with actions inside the clip box and positive weights.
pub fn random_batch(seed: u64, n: usize, input_dim: usize, output_dim: usize) -> Batch {
    let mut r = rng_for(seed, &[99]);
    let pairs = (0..n)
        .map(|i| StateActionPair {
            state: (0..input_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            action: (0..output_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            task_id: 0,
            traj_id: 0,
            step_idx: i,
        })
        .collect();
    let weights = (0..n).map(|_| r.random_range(0.2..2.0)).collect();
    Batch { pairs, weights }
}

/// Random parameters with the log-std entries kept away from their clamps.
pub fn random_params(config: &PolicyConfig, seed: u64) -> PolicyParams {
    let p = PolicyParams::init(config, seed).unwrap();
    let mut r = rng_for(seed, &[98]);
    let n = p.len();
    let mut v = p.values.clone();
    for x in v.iter_mut().skip(n - config.output_dim) {
        *x = r.random_range(-0.8..0.2);
    }
    p.with_values(v).unwrap()
}

/// `(1/|B|) Σ w_i ℓ_i`, the objective whose gradient `grad_loss` returns.
pub fn batch_loss(params: &PolicyParams, batch: &Batch, kind: LossKind) -> f64 {
    let n = batch.pairs.len() as f64;
    batch
        .pairs
        .iter()
        .zip(&batch.weights)
        .map(|(p, w)| w * sample_loss(params, &p.state, &p.action, kind).unwrap())
        .sum::<f64>()
        / n
}

pub fn shifted(params: &PolicyParams, dir: &[f64], eps: f64) -> PolicyParams {
    params
        .with_values(params.values.iter().zip(dir).map(|(x, d)| x + eps * d).collect())
        .unwrap()
}

/// Central differences of `f` along every coordinate.
pub fn fd_gradient(params: &PolicyParams, eps: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|k| {
            let mut e = vec![0.0; params.len()];
            e[k] = 1.0;
            (f(&shifted(params, &e, eps)) - f(&shifted(params, &e, -eps))) / (2.0 * eps)
        })
        .collect()
}

/// Worst relative error of `grad_loss` against central differences (ε=1e-5).
pub fn grad_check(seed: u64, kind: LossKind) -> f64 {
    let config = PolicyConfig::new(4, 2, vec![6, 5]);
    let params = random_params(&config, seed);
    let batch = random_batch(seed, 7, 4, 2);
    let analytic = grad_loss(&params, &batch.samples(), kind).unwrap();
    let oracle = fd_gradient(&params, 1e-5, |p| batch_loss(p, &batch, kind));
    max_rel_err(&analytic, &oracle, 1e-9)
}

/// Worst relative error of `hvp_loss` against differences of gradients (ε=1e-4).
pub fn hvp_check(seed: u64) -> f64 {
    let config = PolicyConfig::new(4, 2, vec![6, 5]);
    let params = random_params(&config, seed);
    let batch = random_batch(seed, 7, 4, 2);
    let mut r = rng_for(seed, &[97]);
    let v: Vec<f64> = (0..params.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let analytic = hvp_loss(&params, &batch.samples(), LossKind::Nll, &v).unwrap();
    let eps = 1e-4;
    let gp = grad_loss(&shifted(&params, &v, eps), &batch.samples(), LossKind::Nll).unwrap();
    let gm = grad_loss(&shifted(&params, &v, -eps), &batch.samples(), LossKind::Nll).unwrap();
    let oracle: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    max_rel_err(&analytic, &oracle, 1e-8)
}

/// The default micro-benchmark data, observed without the goal.
pub struct Micro {
    pub spec: EnvSpec,
    pub prior: Vec<Trajectory>,
    pub clusters: Vec<Cluster>,
    pub target: Vec<Trajectory>,
    pub estimation_half: Vec<Trajectory>,
    pub evaluation_half: Vec<Trajectory>,
}

pub fn micro(n_expert: usize, n_noisy: usize) -> Micro {
    let spec = EnvSpec {
        obs_mode: ObsMode::NoGoal,
        ..EnvSpec::default()
    };
    let prior = generate_prior(&spec, n_expert, n_noisy, 0.5, 0).unwrap();
    let target = generate_target(&spec, 0, 5, prior.len(), 0).unwrap();
    let clusters = make_clusters(&prior, Granularity::Trajectory).unwrap();
    let split = split_target(&target, 0).unwrap();
    Micro {
        spec,
        prior,
        clusters,
        target,
        estimation_half: split.estimation_half,
        evaluation_half: split.evaluation_half,
    }
}

pub const DIMS: (usize, usize) = (OBS_DIM, ACTION_DIM);

/// Compares `value` with the committed fixture `tests/fixtures/<name>.json`.
/// With `DATAMIL_BLESS=1` the fixture is rewritten instead.
pub fn check_fixture(name: &str, value: &serde_json::Value) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.json"));
    let rendered = serde_json::to_string_pretty(value).unwrap() + "\n";
    if std::env::var_os("DATAMIL_BLESS").is_some() {
        std::fs::write(&path, rendered).unwrap();
        return;
    }
    let frozen = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(rendered, frozen, "fixture {name} changed");
}

/// Batch draws and target draws of a 100 × 100 co-trained SGD run.
pub fn mix_counts(seed: u64) -> (usize, usize) {
    let m = micro(1, 1);
    let data = TrainingSet::new(&m.prior, &m.clusters, &m.target);
    let c = TrainConfig {
        policy: PolicyConfig::new(4, 2, vec![8]),
        steps: 100,
        learning_rate: 0.05,
        batch_size: 100,
        optimizer: Optimizer::Sgd,
        loss: LossKind::Nll,
        seed,
        cotrain: Some(CoTrain { alpha: 0.5 }),
        checkpoint_stride: 1,
    };
    let (_, tape) = train(&data, &SubsetMask::ones(m.clusters.len()), &c).unwrap();
    // the pool lists prior pairs first, then target pairs
    let n_prior_pairs: usize = m.prior.iter().map(|t| t.len()).sum();
    let (mut draws, mut target) = (0usize, 0usize);
    for b in &tape.batches {
        let BatchRecord::Sampled(idx) = b else { panic!("sgd records sampled batches") };
        draws += idx.len();
        target += idx.iter().filter(|&&i| i as usize >= n_prior_pairs).count();
    }
    (draws, target)
}
