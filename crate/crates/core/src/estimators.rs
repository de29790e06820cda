//! Linear datamodels `f̂(z) = offset + Σ_i z_i · τ_i` and the two ways of
//! estimating `τ`:
//!
//! * **regression**: retrain on many random subsets, then regress the measured
//!   outcome onto the subset indicator vectors;
//! * **metagradient**: train once at `z₀ = 1` and differentiate the proxy
//!   metric with respect to the per-cluster data weights through every
//!   optimizer step (reverse accumulation over the training tape).

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_bernoulli_mask, MaskKind, SubsetMask};
use crate::error::{Error, Result};
use crate::policy::batch_dual;
use crate::proxy::{proxy_metric, proxy_value_and_grad, ProxyConfig};
use crate::rng::derive_seed;
use crate::stats;
use crate::toyenv::{rollout_success_rate, EnvSpec};
use crate::trainer::{params_trajectory, step_terms, train, weighted_terms, Pool, TrainConfig, TrainingSet};
use crate::dataset::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Regression,
    Metagradient,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Regression => "regression",
            EstimatorKind::Metagradient => "metagradient",
        }
    }
}

/// What a datamodel predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTarget {
    RolloutSuccess,
    ProxyLoss,
}

impl OutcomeTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeTarget::RolloutSuccess => "rollout_success",
            OutcomeTarget::ProxyLoss => "proxy_loss",
        }
    }
}

/// How a trained policy is scored.
#[derive(Clone, Copy, Debug)]
pub enum Evaluator<'a> {
    Rollouts {
        env: &'a EnvSpec,
        task_id: usize,
        n_rollouts: usize,
        seed: u64,
    },
    Proxy {
        target_eval: &'a [Trajectory],
        cfg: &'a ProxyConfig,
    },
}

impl Evaluator<'_> {
    pub fn target(&self) -> OutcomeTarget {
        match self {
            Evaluator::Rollouts { .. } => OutcomeTarget::RolloutSuccess,
            Evaluator::Proxy { .. } => OutcomeTarget::ProxyLoss,
        }
    }

    pub fn score(&self, params: &crate::policy::PolicyParams) -> Result<f64> {
        match *self {
            Evaluator::Rollouts {
                env,
                task_id,
                n_rollouts,
                seed,
            } => rollout_success_rate(params, env, task_id, n_rollouts, seed),
            Evaluator::Proxy { target_eval, cfg } => proxy_metric(params, target_eval, cfg),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: Vec<u64>,
    pub n_subsets: Option<usize>,
    pub inclusion_prob: Option<f64>,
    pub skipped_subsets: usize,
    pub ridge_lambda: Option<f64>,
    pub fit_offset: Option<bool>,
    pub tape_fingerprint: Option<String>,
    pub train_steps: usize,
    pub optimizer: String,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datamodel {
    pub tau: Vec<f64>,
    pub offset: f64,
    pub estimator: EstimatorKind,
    pub target: OutcomeTarget,
    pub provenance: Provenance,
}

/// Predicted outcome for a binary subset: `offset + Σ_{z_i = 1} τ_i`.
pub fn predict(dm: &Datamodel, mask: &SubsetMask) -> Result<f64> {
    if mask.len() != dm.tau.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries, datamodel has {}",
            mask.len(),
            dm.tau.len()
        )));
    }
    if mask.kind != MaskKind::Binary {
        return Err(Error::InvalidArgument("predict expects a binary mask".into()));
    }
    Ok(dm.offset
        + dm.tau
            .iter()
            .zip(mask.weights())
            .filter(|(_, &z)| z != 0.0)
            .map(|(t, _)| t)
            .sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetOutcome {
    pub mask: SubsetMask,
    pub outcome: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub outcomes: Vec<SubsetOutcome>,
    /// Subsets whose training diverged or had no data; excluded.
    pub skipped: usize,
    pub seconds: f64,
}

/// Trains on each mask (in parallel) and scores the result. Subsets whose
/// training diverges are dropped and counted.
pub fn collect_outcomes_for_masks(
    data: &TrainingSet<'_>,
    masks: Vec<SubsetMask>,
    cfg: &TrainConfig,
    eval: &Evaluator<'_>,
) -> Result<Outcomes> {
    Ok(collect_outcomes_multi(data, masks, cfg, std::slice::from_ref(eval))?.remove(0))
}

/// Like [`collect_outcomes_for_masks`], but scores every trained policy with
/// each evaluator; returns one outcome list per evaluator, aligned by subset.
pub fn collect_outcomes_multi(
    data: &TrainingSet<'_>,
    masks: Vec<SubsetMask>,
    cfg: &TrainConfig,
    evals: &[Evaluator<'_>],
) -> Result<Vec<Outcomes>> {
    let start = Instant::now();
    let results: Vec<Result<Option<(SubsetMask, Vec<f64>)>>> = masks
        .into_par_iter()
        .map(|mask| match train(data, &mask, cfg) {
            Ok((params, _)) => {
                let scores = evals.iter().map(|e| e.score(&params)).collect::<Result<Vec<_>>>()?;
                if scores.iter().any(|s| !s.is_finite()) {
                    return Ok(None);
                }
                Ok(Some((mask, scores)))
            }
            Err(Error::NonFinite { .. } | Error::EmptyTrainingSet) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut kept = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(o) => kept.push(o),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{skipped} subset trainings diverged or were empty and were skipped");
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok((0..evals.len())
        .map(|k| Outcomes {
            outcomes: kept
                .iter()
                .map(|(mask, scores)| SubsetOutcome {
                    mask: mask.clone(),
                    outcome: scores[k],
                })
                .collect(),
            skipped,
            seconds,
        })
        .collect())
}

/// The `j`-th random subset of a collection seeded with `seed`.
pub fn subset_mask(n_clusters: usize, p: f64, seed: u64, j: usize) -> Result<SubsetMask> {
    sample_bernoulli_mask(n_clusters, p, derive_seed(seed, &[j as u64]))
}

/// Samples `n_subsets` Bernoulli(`p`) masks and collects their outcomes. All
/// subset trainings share `cfg.seed`.
pub fn collect_outcomes(
    data: &TrainingSet<'_>,
    n_subsets: usize,
    p: f64,
    cfg: &TrainConfig,
    eval: &Evaluator<'_>,
    seed: u64,
) -> Result<Outcomes> {
    if n_subsets == 0 {
        return Err(Error::InvalidArgument("need at least one subset".into()));
    }
    let masks = (0..n_subsets)
        .map(|j| subset_mask(data.clusters.len(), p, seed, j))
        .collect::<Result<Vec<_>>>()?;
    collect_outcomes_for_masks(data, masks, cfg, eval)
}

/// Ridge strength for the regression estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Ridge {
    Absolute(f64),
    /// `c · trace(XᵀX) / N`, i.e. relative to the mean diagonal.
    TraceNormalized(f64),
}

/// Least-squares fit of `outcome ≈ offset + zᵀτ` with an L2 penalty on `τ`
/// (the offset is never penalized). Solves the normal equations by Cholesky.
pub fn regression_estimate(outcomes: &[SubsetOutcome], ridge: Ridge, fit_offset: bool) -> Result<Datamodel> {
    if outcomes.len() < 2 {
        return Err(Error::InvalidArgument("regression needs at least 2 outcomes".into()));
    }
    let n = outcomes[0].mask.len();
    if outcomes.iter().any(|o| o.mask.len() != n) {
        return Err(Error::Shape("subset masks differ in length".into()));
    }
    let cols = n + fit_offset as usize;
    let x = DMatrix::from_fn(outcomes.len(), cols, |r, c| {
        if c < n {
            outcomes[r].mask.weights()[c]
        } else {
            1.0
        }
    });
    let y = DVector::from_iterator(outcomes.len(), outcomes.iter().map(|o| o.outcome));
    let mut gram = x.transpose() * &x;
    let rhs = x.transpose() * y;
    let lambda = match ridge {
        Ridge::Absolute(l) => l,
        Ridge::TraceNormalized(c) => c * (0..n).map(|i| gram[(i, i)]).sum::<f64>() / n.max(1) as f64,
    };
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge lambda {lambda} must be non-negative")));
    }
    for i in 0..n {
        gram[(i, i)] += lambda;
    }
    let max_diag = (0..cols).map(|i| gram[(i, i)]).fold(0.0_f64, f64::max);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
    let min_pivot = chol.l().diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-12 * max_diag {
        return Err(Error::Singular(format!(
            "normal equations are numerically singular (pivot ratio {:.3e})",
            min_pivot / max_diag
        )));
    }
    let beta = chol.solve(&rhs);
    Ok(Datamodel {
        tau: beta.iter().take(n).copied().collect(),
        offset: if fit_offset { beta[n] } else { 0.0 },
        estimator: EstimatorKind::Regression,
        target: OutcomeTarget::ProxyLoss,
        provenance: Provenance {
            n_subsets: Some(outcomes.len()),
            ridge_lambda: Some(lambda),
            fit_offset: Some(fit_offset),
            ..Provenance::default()
        },
    })
}

/// Fit quality of a datamodel on held-out subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub mse: f64,
    pub n: usize,
}

pub fn evaluate_datamodel(dm: &Datamodel, heldout: &[SubsetOutcome]) -> Result<FitStats> {
    if heldout.len() < 3 {
        return Err(Error::InvalidArgument("need at least 3 held-out outcomes".into()));
    }
    let pred = heldout.iter().map(|o| predict(dm, &o.mask)).collect::<Result<Vec<_>>>()?;
    let actual: Vec<f64> = heldout.iter().map(|o| o.outcome).collect();
    Ok(FitStats {
        pearson: stats::pearson(&pred, &actual),
        spearman: stats::spearman(&pred, &actual),
        mse: stats::mse(&pred, &actual),
        n: heldout.len(),
    })
}

/// Exact gradient of the proxy metric with respect to per-cluster weights at
/// `z₀ = 1`, by reverse accumulation through the recorded training run:
///
/// ```text
/// λ_T = ∇M̂(θ_T)
/// τ_c += -η Σ_{i ∈ B_t, c(i) = c} base_i · ∇ℓ_i(θ_t)ᵀ λ_{t+1}
/// λ_t  = λ_{t+1} - η H_t λ_{t+1}
/// ```
///
/// Pairs in `data.target` are trained on alongside the prior with weight 1 and
/// receive no coefficient. The offset makes `predict(ones) = M̂(A(z₀))`.
pub fn metagradient_estimate(
    data: &TrainingSet<'_>,
    target_eval: &[Trajectory],
    cfg: &TrainConfig,
    proxy: &ProxyConfig,
) -> Result<Datamodel> {
    if matches!(cfg.optimizer, crate::trainer::Optimizer::Adam { .. }) {
        return Err(Error::Unsupported(
            "metagradient estimation requires gd_full_batch or sgd (no adam reverse pass)".into(),
        ));
    }
    let n = data.clusters.len();
    let z0 = SubsetMask::ones(n).to_continuous();
    let (params, tape) = train(data, &z0, cfg)?;
    let (value, mut adjoint) = proxy_value_and_grad(&params, target_eval, proxy)?;
    let pool = Pool::build(data)?;
    let thetas = params_trajectory(&tape, &pool)?;
    let layout = cfg.policy.layout();
    let lr = cfg.learning_rate;
    let mut tau = vec![0.0; n];
    for t in (0..tape.steps()).rev() {
        let base = step_terms(&pool, &z0, cfg, &tape.batches[t]);
        let terms = weighted_terms(&pool, &z0, &base);
        let pass = batch_dual(&thetas[t], &adjoint, &layout, &terms, cfg.loss);
        for ((idx, b), d) in base.iter().zip(&pass.directional) {
            if let Some(c) = pool.items[*idx as usize].cluster {
                tau[c] -= lr * b * d;
            }
        }
        for (a, h) in adjoint.iter_mut().zip(&pass.hvp) {
            *a -= lr * h;
        }
        if adjoint.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                what: "adjoint".into(),
            });
        }
    }
    let offset = value - tau.iter().sum::<f64>();
    Ok(Datamodel {
        tau,
        offset,
        estimator: EstimatorKind::Metagradient,
        target: OutcomeTarget::ProxyLoss,
        provenance: Provenance {
            seeds: vec![cfg.seed],
            tape_fingerprint: Some(tape.data_fingerprint.clone()),
            train_steps: cfg.steps,
            optimizer: cfg.optimizer.name().into(),
            ..Provenance::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(bits: &[bool], y: f64) -> SubsetOutcome {
        SubsetOutcome {
            mask: SubsetMask::binary(bits),
            outcome: y,
        }
    }

    #[test]
    fn two_cluster_exact() {
        let o = vec![
            outcome(&[false, false], 0.0),
            outcome(&[true, false], 2.0),
            outcome(&[false, true], -1.0),
            outcome(&[true, true], 1.0),
        ];
        let dm = regression_estimate(&o, Ridge::Absolute(0.0), false).unwrap();
        assert!((dm.tau[0] - 2.0).abs() < 1e-14 && (dm.tau[1] + 1.0).abs() < 1e-14);
        assert!((predict(&dm, &SubsetMask::binary(&[true, true])).unwrap() - 1.0 - dm.offset).abs() < 1e-14);
    }

    #[test]
    fn singular_without_ridge() {
        // cluster 1 never varies independently of cluster 0
        let o = vec![outcome(&[true, true], 1.0), outcome(&[false, false], 0.0)];
        assert!(matches!(
            regression_estimate(&o, Ridge::Absolute(0.0), false),
            Err(Error::Singular(_))
        ));
        assert!(regression_estimate(&o, Ridge::Absolute(0.1), false).is_ok());
    }

    #[test]
    fn predict_contract() {
        let dm = Datamodel {
            tau: vec![2.0, -1.0],
            offset: 0.5,
            estimator: EstimatorKind::Regression,
            target: OutcomeTarget::ProxyLoss,
            provenance: Provenance::default(),
        };
        assert_eq!(predict(&dm, &SubsetMask::binary(&[false, false])).unwrap(), 0.5);
        assert_eq!(predict(&dm, &SubsetMask::binary(&[true, true])).unwrap(), 1.5);
        assert!(predict(&dm, &SubsetMask::binary(&[true])).is_err());
    }

    #[test]
    fn degenerate_heldout() {
        let dm = Datamodel {
            tau: vec![1.0],
            offset: 0.0,
            estimator: EstimatorKind::Regression,
            target: OutcomeTarget::ProxyLoss,
            provenance: Provenance::default(),
        };
        let h = vec![outcome(&[true], 3.0), outcome(&[false], 3.0), outcome(&[true], 3.0)];
        let s = evaluate_datamodel(&dm, &h).unwrap();
        assert_eq!((s.pearson, s.spearman), (None, None));
        assert!((s.mse - (4.0 + 9.0 + 4.0) / 3.0).abs() < 1e-15);
        assert!(evaluate_datamodel(&dm, &h[..2]).is_err());
    }
}
