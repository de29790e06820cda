//! Rollout-free proxy for task success: the negative (optionally
//! state-weighted) behavior-cloning loss on held-out target demonstrations,
//! averaged over pairs. Higher is better.

use serde::{Deserialize, Serialize};

use crate::dataset::{StateActionPair, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{batch_grad, LossKind, PolicyParams, Term};

/// Per-pair weights `w(s, a)` inside the proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StateWeights {
    Uniform,
    /// Pairs whose position lies within `radius` of their task's goal get
    /// `weight`, all others 1. `goals[k]` is the goal of task `k`.
    NearGoal {
        radius: f64,
        weight: f64,
        goals: Vec<[f64; 2]>,
    },
}

impl StateWeights {
    pub fn near_goal(radius: f64, weight: f64, goals: Vec<[f64; 2]>) -> Result<Self> {
        if !(weight > 0.0) || !(radius >= 0.0) {
            return Err(Error::InvalidArgument(
                "near-goal weight must be positive and radius non-negative".into(),
            ));
        }
        Ok(StateWeights::NearGoal {
            radius,
            weight,
            goals,
        })
    }

    pub fn weight(&self, pair: &StateActionPair) -> f64 {
        match self {
            StateWeights::Uniform => 1.0,
            StateWeights::NearGoal {
                radius,
                weight,
                goals,
            } => {
                let g = goals[pair.task_id];
                let d = (pair.state[0] - g[0]).hypot(pair.state[1] - g[1]);
                if d <= *radius {
                    *weight
                } else {
                    1.0
                }
            }
        }
    }
}

/// Loss and weights that define a proxy metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub loss: LossKind,
    pub weights: StateWeights,
}

impl ProxyConfig {
    pub fn uniform(loss: LossKind) -> Self {
        Self {
            loss,
            weights: StateWeights::Uniform,
        }
    }
}

fn terms<'a>(target: &'a [Trajectory], weight: impl Fn(&StateActionPair) -> f64) -> Result<Vec<Term<'a>>> {
    let n: usize = target.iter().map(Trajectory::len).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("proxy needs at least one target pair".into()));
    }
    // Negated so that the loss-gradient machinery returns ∇M̂ directly.
    let inv = -1.0 / n as f64;
    for w in target.iter().flat_map(|t| t.pairs()).map(&weight) {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("state weight {w} must be positive")));
        }
    }
    Ok(target
        .iter()
        .flat_map(|t| t.pairs())
        .map(|p| Term {
            state: &p.state,
            action: &p.action,
            coef: inv * weight(p),
        })
        .collect())
}

fn eval(params: &PolicyParams, target: &[Trajectory], loss: LossKind, weight: impl Fn(&StateActionPair) -> f64) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    let t = terms(target, weight)?;
    if let Some(s) = t.first() {
        if s.state.len() != params.config.input_dim || s.action.len() != params.config.output_dim {
            return Err(Error::Shape("target pairs do not match the policy".into()));
        }
    }
    let (value, grad) = batch_grad(&params.values, &params.config.layout(), &t, loss);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "proxy loss".into(),
        });
    }
    Ok((value, grad))
}

/// `-(1/n) Σ w(s,a) · ℓ(π(s), a)` over all `n` pairs of `target_eval`.
pub fn proxy_metric(params: &PolicyParams, target_eval: &[Trajectory], cfg: &ProxyConfig) -> Result<f64> {
    Ok(eval(params, target_eval, cfg.loss, |p| cfg.weights.weight(p))?.0)
}

/// Exact gradient of [`proxy_metric`] with respect to the parameters.
pub fn grad_proxy(params: &PolicyParams, target_eval: &[Trajectory], cfg: &ProxyConfig) -> Result<Vec<f64>> {
    Ok(eval(params, target_eval, cfg.loss, |p| cfg.weights.weight(p))?.1)
}

/// Value and gradient in one pass.
pub fn proxy_value_and_grad(params: &PolicyParams, target_eval: &[Trajectory], cfg: &ProxyConfig) -> Result<(f64, Vec<f64>)> {
    eval(params, target_eval, cfg.loss, |p| cfg.weights.weight(p))
}
