//! Weighted behavior-cloning training `A(z)` and its replayable tape.
//!
//! At step `t` the loss is `L_t(θ, z) = Σ_{i ∈ B_t} base_i · w_i(z) · ℓ(θ; pair_i)`
//! where `w_i(z) = z_{c(i)}` for a prior pair in cluster `c(i)` and `1` for a
//! target pair, and `base_i` is the batch normalization. For sampled batches
//! `base_i = 1/|B_t|`, which keeps `L_t` linear in `z`. Full-batch steps use
//! `1/|pool|` (or the `α`-split of the co-training mixture).

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{resolve_clusters, Cluster, MaskKind, SubsetMask, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{batch_grad, LossKind, PolicyConfig, PolicyParams, Term};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    GdFullBatch,
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::GdFullBatch => "gd_full_batch",
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

/// Mix target pairs into every batch with probability `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoTrain {
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss: LossKind,
    pub seed: u64,
    #[serde(default)]
    pub cotrain: Option<CoTrain>,
    #[serde(default = "default_stride")]
    pub checkpoint_stride: usize,
}

fn default_stride() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 && self.optimizer != Optimizer::GdFullBatch {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.checkpoint_stride == 0 {
            return Err(Error::InvalidArgument("checkpoint_stride must be at least 1".into()));
        }
        if let Some(c) = self.cotrain {
            if !(0.0..=1.0).contains(&c.alpha) {
                return Err(Error::InvalidArgument(format!(
                    "co-training alpha {} outside [0, 1]",
                    c.alpha
                )));
            }
        }
        Ok(())
    }
}

/// The data a training run sees. Without co-training, `target` pairs are
/// simply added to the pool with weight 1.
#[derive(Clone, Copy, Debug)]
pub struct TrainingSet<'a> {
    pub prior: &'a [Trajectory],
    pub clusters: &'a [Cluster],
    pub target: &'a [Trajectory],
}

impl<'a> TrainingSet<'a> {
    pub fn new(prior: &'a [Trajectory], clusters: &'a [Cluster], target: &'a [Trajectory]) -> Self {
        Self {
            prior,
            clusters,
            target,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolItem<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    /// `None` for target pairs.
    pub cluster: Option<usize>,
}

/// Flattened pairs: prior pairs in cluster order, then target pairs.
pub(crate) struct Pool<'a> {
    pub items: Vec<PoolItem<'a>>,
    pub n_prior: usize,
    pub fingerprint: String,
}

impl<'a> Pool<'a> {
    pub fn build(data: &TrainingSet<'a>) -> Result<Self> {
        let resolved = resolve_clusters(data.prior, data.clusters)?;
        let mut items = Vec::new();
        for (c, (ti, span)) in resolved.iter().enumerate() {
            for p in &data.prior[*ti].pairs()[span.start..span.start + span.len] {
                items.push(PoolItem {
                    state: &p.state,
                    action: &p.action,
                    cluster: Some(c),
                });
            }
        }
        let n_prior = items.len();
        for t in data.target {
            for p in t.pairs() {
                items.push(PoolItem {
                    state: &p.state,
                    action: &p.action,
                    cluster: None,
                });
            }
        }
        let mut h = Sha256::new();
        h.update((n_prior as u64).to_le_bytes());
        for it in &items {
            h.update((it.cluster.map_or(u64::MAX, |c| c as u64)).to_le_bytes());
            for v in it.state.iter().chain(it.action) {
                h.update(v.to_le_bytes());
            }
        }
        Ok(Self {
            items,
            n_prior,
            fingerprint: hex::encode(h.finalize()),
        })
    }

    pub fn weight(&self, mask: &SubsetMask, item: usize) -> f64 {
        match self.items[item].cluster {
            Some(c) => mask.weights()[c],
            None => 1.0,
        }
    }
}

/// Which prior items can be drawn and which target items exist, given a mask.
struct Eligible {
    prior: Vec<u32>,
    target: Vec<u32>,
}

fn eligible(pool: &Pool<'_>, mask: &SubsetMask) -> Eligible {
    let prior = (0..pool.n_prior)
        .filter(|&i| match mask.kind {
            MaskKind::Binary => pool.weight(mask, i) != 0.0,
            MaskKind::Continuous => true,
        })
        .map(|i| i as u32)
        .collect();
    let target = (pool.n_prior..pool.items.len()).map(|i| i as u32).collect();
    Eligible { prior, target }
}

/// Batch membership of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRecord {
    /// Every eligible pair.
    Full,
    /// Pool indices drawn with replacement.
    Sampled(Vec<u32>),
}

/// Deterministic record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTape {
    pub config: TrainConfig,
    pub mask: SubsetMask,
    pub data_fingerprint: String,
    pub initial: Vec<f64>,
    pub batches: Vec<BatchRecord>,
    /// `(step, params before that step)` every `checkpoint_stride` steps.
    pub checkpoints: Vec<(usize, Vec<f64>)>,
    pub final_params: Vec<f64>,
    pub losses: Vec<f64>,
}

impl TrainingTape {
    pub fn steps(&self) -> usize {
        self.batches.len()
    }

    /// Tape of the first `steps` steps; its final parameters are the
    /// checkpoint at `steps` when one exists, otherwise left for replay.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-step tape to {steps} steps",
                self.steps()
            )));
        }
        let mut t = self.clone();
        t.config.steps = steps;
        t.batches.truncate(steps);
        t.losses.truncate(steps);
        t.checkpoints.retain(|(s, _)| *s < steps);
        t.final_params = self
            .checkpoints
            .iter()
            .find(|(s, _)| *s == steps)
            .map(|(_, p)| p.clone())
            .unwrap_or_default();
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Per-step loss terms as `(pool index, base coefficient)`; the final
/// coefficient is `base · weight(mask)`.
pub(crate) fn step_terms(
    pool: &Pool<'_>,
    mask: &SubsetMask,
    cfg: &TrainConfig,
    record: &BatchRecord,
) -> Vec<(u32, f64)> {
    match record {
        BatchRecord::Full => {
            let el = eligible(pool, mask);
            let (np, nt) = (el.prior.len(), el.target.len());
            let (prior_base, target_base) = match cfg.cotrain {
                Some(CoTrain { alpha }) if np > 0 && nt > 0 => {
                    ((1.0 - alpha) / np as f64, alpha / nt as f64)
                }
                _ => {
                    let n = (np + nt) as f64;
                    (1.0 / n, 1.0 / n)
                }
            };
            el.prior
                .iter()
                .map(|&i| (i, prior_base))
                .chain(el.target.iter().map(|&i| (i, target_base)))
                .collect()
        }
        BatchRecord::Sampled(idx) => {
            let base = 1.0 / idx.len() as f64;
            idx.iter().map(|&i| (i, base)).collect()
        }
    }
}

fn sample_batch(el: &Eligible, cfg: &TrainConfig, step: usize) -> Vec<u32> {
    let mut r = rng::rng_for(cfg.seed, &[rng::STREAM_BATCH, step as u64]);
    (0..cfg.batch_size)
        .map(|_| {
            let from_target = match cfg.cotrain {
                Some(CoTrain { alpha }) => {
                    let u: f64 = r.random();
                    if el.prior.is_empty() {
                        true
                    } else if el.target.is_empty() {
                        false
                    } else {
                        u < alpha
                    }
                }
                None => false,
            };
            if from_target {
                el.target[r.random_range(0..el.target.len())]
            } else if cfg.cotrain.is_some() {
                el.prior[r.random_range(0..el.prior.len())]
            } else {
                // Without co-training, target pairs are part of the pool.
                let n = el.prior.len() + el.target.len();
                let k = r.random_range(0..n);
                if k < el.prior.len() {
                    el.prior[k]
                } else {
                    el.target[k - el.prior.len()]
                }
            }
        })
        .collect()
}

/// Materializes terms with their final coefficients.
pub(crate) fn weighted_terms<'a>(pool: &Pool<'a>, mask: &SubsetMask, terms: &[(u32, f64)]) -> Vec<Term<'a>> {
    terms
        .iter()
        .map(|&(i, base)| {
            let it = &pool.items[i as usize];
            Term {
                state: it.state,
                action: it.action,
                coef: base * pool.weight(mask, i as usize),
            }
        })
        .collect()
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Applies one optimizer step in place; returns the step's loss.
fn apply_step(
    params: &mut [f64],
    adam: &mut Option<AdamState>,
    cfg: &TrainConfig,
    pool: &Pool<'_>,
    mask: &SubsetMask,
    record: &BatchRecord,
    step: usize,
) -> Result<f64> {
    let layout = cfg.policy.layout();
    let terms = weighted_terms(pool, mask, &step_terms(pool, mask, cfg, record));
    let (loss, grad) = batch_grad(params, &layout, &terms, cfg.loss);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step,
            what: "training loss".into(),
        });
    }
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::GdFullBatch | Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let st = adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; params.len()],
                v: vec![0.0; params.len()],
            });
            let t = (step + 1) as i32;
            let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            for i in 0..params.len() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                params[i] -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
            }
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            step,
            what: "parameters".into(),
        });
    }
    Ok(loss)
}

fn check_inputs(pool: &Pool<'_>, data: &TrainingSet<'_>, mask: &SubsetMask, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    mask.validate()?;
    if mask.len() != data.clusters.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} clusters",
            mask.len(),
            data.clusters.len()
        )));
    }
    let el = eligible(pool, mask);
    if el.prior.is_empty() && el.target.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(it) = pool.items.first() {
        if it.state.len() != cfg.policy.input_dim || it.action.len() != cfg.policy.output_dim {
            return Err(Error::Shape(format!(
                "data has ({}, {}) dimensions, policy expects ({}, {})",
                it.state.len(),
                it.action.len(),
                cfg.policy.input_dim,
                cfg.policy.output_dim
            )));
        }
    }
    Ok(())
}

/// Trains a policy on `data` weighted by `mask`.
///
/// Binary masks drop zero-weight clusters from the pool entirely; continuous
/// masks keep every pair and scale its loss by its cluster's weight.
pub fn train(data: &TrainingSet<'_>, mask: &SubsetMask, cfg: &TrainConfig) -> Result<(PolicyParams, TrainingTape)> {
    let pool = Pool::build(data)?;
    check_inputs(&pool, data, mask, cfg)?;
    let init = PolicyParams::init(&cfg.policy, cfg.seed)?;
    let el = eligible(&pool, mask);
    let mut params = init.values.clone();
    let mut adam = None;
    let mut batches = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step % cfg.checkpoint_stride == 0 {
            checkpoints.push((step, params.clone()));
        }
        let record = match cfg.optimizer {
            Optimizer::GdFullBatch => BatchRecord::Full,
            _ => BatchRecord::Sampled(sample_batch(&el, cfg, step)),
        };
        losses.push(apply_step(&mut params, &mut adam, cfg, &pool, mask, &record, step)?);
        batches.push(record);
    }
    checkpoints.push((cfg.steps, params.clone()));
    let tape = TrainingTape {
        config: cfg.clone(),
        mask: mask.clone(),
        data_fingerprint: pool.fingerprint.clone(),
        initial: init.values.clone(),
        batches,
        checkpoints,
        final_params: params.clone(),
        losses,
    };
    Ok((init.with_values(params)?, tape))
}

fn check_tape(tape: &TrainingTape, pool: &Pool<'_>) -> Result<()> {
    if tape.data_fingerprint != pool.fingerprint {
        return Err(Error::CorruptedTape("data fingerprint does not match".into()));
    }
    if tape.batches.len() != tape.config.steps {
        return Err(Error::CorruptedTape(format!(
            "{} batch records for {} steps",
            tape.batches.len(),
            tape.config.steps
        )));
    }
    if tape.initial.len() != tape.config.policy.layout().len {
        return Err(Error::CorruptedTape("initial parameters have the wrong length".into()));
    }
    for (t, b) in tape.batches.iter().enumerate() {
        if let BatchRecord::Sampled(idx) = b {
            if idx.is_empty() || idx.iter().any(|&i| i as usize >= pool.items.len()) {
                return Err(Error::CorruptedTape(format!("invalid batch at step {t}")));
            }
        }
    }
    Ok(())
}

/// Re-runs the recorded steps from the tape's initial parameters.
pub fn replay(tape: &TrainingTape, data: &TrainingSet<'_>) -> Result<PolicyParams> {
    let pool = Pool::build(data)?;
    check_tape(tape, &pool)?;
    let mut params = tape.initial.clone();
    let mut adam = None;
    for (step, record) in tape.batches.iter().enumerate() {
        apply_step(&mut params, &mut adam, &tape.config, &pool, &tape.mask, record, step)?;
    }
    let out = PolicyParams {
        config: tape.config.policy.clone(),
        values: params,
    };
    out.validate()?;
    Ok(out)
}

/// Parameters before every step `0..T` of a plain-gradient tape, recomputing
/// between checkpoints when the stride exceeds 1. Used by the reverse pass.
pub(crate) fn params_trajectory(tape: &TrainingTape, pool: &Pool<'_>) -> Result<Vec<Vec<f64>>> {
    check_tape(tape, pool)?;
    if matches!(tape.config.optimizer, Optimizer::Adam { .. }) {
        return Err(Error::Unsupported(
            "reverse pass through adam is not supported; use gd_full_batch or sgd".into(),
        ));
    }
    let mut out = Vec::with_capacity(tape.steps());
    let mut ck = tape.checkpoints.iter().peekable();
    let mut params = tape.initial.clone();
    let mut none = None;
    for (step, record) in tape.batches.iter().enumerate() {
        while let Some((s, p)) = ck.peek() {
            if *s < step {
                ck.next();
            } else {
                if *s == step {
                    params = p.clone();
                }
                break;
            }
        }
        out.push(params.clone());
        apply_step(&mut params, &mut none, &tape.config, pool, &tape.mask, record, step)?;
    }
    Ok(out)
}
