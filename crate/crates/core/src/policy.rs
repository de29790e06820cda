//! MLP policy with a diagonal-Gaussian head and its behavior-cloning losses.
//!
//! Parameters live in one flat vector. For each layer the weight matrix is
//! stored row-major (`out x in`) followed by its bias; the log-std vector of the
//! Gaussian head, when present, comes last. Hidden layers use `tanh`, the output
//! layer is linear and produces the action mean. The log-std is a learned,
//! state-independent vector clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
//!
//! Gradients are computed by hand-written backprop that is generic over
//! [`Scalar`]; running it on dual numbers yields exact Hessian-vector products.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::StateActionPair;
use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LOG_STD_INIT: f64 = -0.5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Samples per parallel work unit. Partial sums are reduced in chunk order,
/// which keeps batch results bit-identical regardless of thread count.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Mean network plus a learned state-independent log-std vector.
    GaussianLearnedLogstd,
    /// Mean network only; NLL uses unit variance.
    MeanOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Nll,
    L1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_head")]
    pub head: Head,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_head() -> Head {
    Head::GaussianLearnedLogstd
}

impl PolicyConfig {
    pub fn new(input_dim: usize, output_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden,
            activation: Activation::Tanh,
            head: Head::GaussianLearnedLogstd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(
                "policy input and output dimensions must be at least 1".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "policy needs at least one hidden layer of non-zero width".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut layers = Vec::with_capacity(self.hidden.len() + 1);
        let mut off = 0;
        let mut n_in = self.input_dim;
        for &n_out in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            layers.push(LayerLayout {
                w_off: off,
                b_off: off + n_out * n_in,
                n_in,
                n_out,
            });
            off += n_out * n_in + n_out;
            n_in = n_out;
        }
        let log_std_off = match self.head {
            Head::GaussianLearnedLogstd => {
                let o = off;
                off += self.output_dim;
                Some(o)
            }
            Head::MeanOnly => None,
        };
        Layout {
            layers,
            log_std_off,
            len: off,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub w_off: usize,
    pub b_off: usize,
    pub n_in: usize,
    pub n_out: usize,
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerLayout>,
    pub log_std_off: Option<usize>,
    pub len: usize,
}

impl Layout {
    fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    fn max_width(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.n_in.max(l.n_out))
            .max()
            .unwrap_or(0)
    }
}

/// Flat policy parameters together with the config that gives them shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub values: Vec<f64>,
}

impl PolicyParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and biases, log-std at
    /// [`LOG_STD_INIT`].
    pub fn init(config: &PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = rng::rng_for(seed, &[rng::STREAM_INIT]);
        let mut values = vec![0.0; layout.len];
        for l in &layout.layers {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for v in &mut values[l.w_off..l.b_off + l.n_out] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        if let Some(o) = layout.log_std_off {
            values[o..o + config.output_dim].fill(LOG_STD_INIT);
        }
        Ok(Self {
            config: config.clone(),
            values,
        })
    }

    pub fn zeros(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            values: vec![0.0; config.layout().len],
            config: config.clone(),
        })
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            config: self.config.clone(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.values.len() != self.config.layout().len {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, config needs {}",
                self.values.len(),
                self.config.layout().len
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                what: "policy parameters".into(),
            });
        }
        Ok(())
    }
}

/// One term of a weighted batch loss.
#[derive(Clone, Copy, Debug)]
pub struct WeightedSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub weight: f64,
}

impl<'a> WeightedSample<'a> {
    pub fn new(pair: &'a StateActionPair, weight: f64) -> Self {
        Self {
            state: &pair.state,
            action: &pair.action,
            weight,
        }
    }
}

/// Mean action and (clamped) log-std for one state.
pub fn forward(params: &PolicyParams, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let layout = params.config.layout();
    if state.len() != layout.input_dim() {
        return Err(Error::Shape(format!(
            "state has {} entries, policy expects {}",
            state.len(),
            layout.input_dim()
        )));
    }
    let mut ws = Workspace::<f64>::new(&layout);
    ws.forward(&params.values, &layout, state);
    let mean = ws.acts[layout.layers.len()].clone();
    let log_std = (0..layout.output_dim())
        .map(|j| log_std_at(&params.values, &layout, j))
        .collect();
    Ok((mean, log_std))
}

/// Mean action only; panics on a dimension mismatch.
pub fn mean_action(params: &PolicyParams, state: &[f64]) -> Vec<f64> {
    forward(params, state).expect("state dimension").0
}

/// Per-pair behavior-cloning loss.
///
/// NLL is `½ (a-μ)ᵀ Σ⁻¹ (a-μ) + ½ log det(2πΣ)` with `Σ = diag(exp(2·log_std))`;
/// L1 is `‖a - μ‖₁`.
pub fn bc_loss(params: &PolicyParams, pair: &StateActionPair, kind: LossKind) -> Result<f64> {
    sample_loss(params, &pair.state, &pair.action, kind)
}

pub fn sample_loss(params: &PolicyParams, state: &[f64], action: &[f64], kind: LossKind) -> Result<f64> {
    check_finite(params)?;
    let layout = params.config.layout();
    check_sample(&layout, state, action)?;
    let mut ws = Workspace::<f64>::new(&layout);
    ws.forward(&params.values, &layout, state);
    Ok(ws.loss_and_head_grad(&params.values, &layout, action, kind))
}

/// Gradient of `(1/|batch|) Σ weight_i · loss_i`.
pub fn grad_loss(params: &PolicyParams, batch: &[WeightedSample<'_>], kind: LossKind) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_finite(params)?;
    let layout = params.config.layout();
    let terms = normalized_terms(&layout, batch)?;
    let (_, grad) = batch_grad(&params.values, &layout, &terms, kind);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "gradient".into(),
        });
    }
    Ok(grad)
}

/// Exact Hessian-vector product of the weighted mean loss.
pub fn hvp_loss(
    params: &PolicyParams,
    batch: &[WeightedSample<'_>],
    kind: LossKind,
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != params.values.len() {
        return Err(Error::Shape(format!(
            "direction has {} entries, parameters have {}",
            v.len(),
            params.values.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_finite(params)?;
    let layout = params.config.layout();
    let terms = normalized_terms(&layout, batch)?;
    let out = batch_dual(&params.values, v, &layout, &terms, kind);
    Ok(out.hvp)
}

fn normalized_terms<'a>(layout: &Layout, batch: &[WeightedSample<'a>]) -> Result<Vec<Term<'a>>> {
    let inv = 1.0 / batch.len() as f64;
    batch
        .iter()
        .map(|s| {
            check_sample(layout, s.state, s.action)?;
            Ok(Term {
                state: s.state,
                action: s.action,
                coef: s.weight * inv,
            })
        })
        .collect()
}

fn check_finite(params: &PolicyParams) -> Result<()> {
    if params.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "policy parameters".into(),
        });
    }
    Ok(())
}

fn check_sample(layout: &Layout, state: &[f64], action: &[f64]) -> Result<()> {
    if state.len() != layout.input_dim() || action.len() != layout.output_dim() {
        return Err(Error::Shape(format!(
            "sample ({}, {}) does not match policy ({}, {})",
            state.len(),
            action.len(),
            layout.input_dim(),
            layout.output_dim()
        )));
    }
    Ok(())
}

fn log_std_at<S: Scalar>(values: &[S], layout: &Layout, j: usize) -> S {
    match layout.log_std_off {
        Some(o) => clamp_log_std(values[o + j]),
        None => S::zero(),
    }
}

#[inline]
fn clamp_log_std<S: Scalar>(raw: S) -> S {
    if raw.re() < LOG_STD_MIN {
        S::cst(LOG_STD_MIN)
    } else if raw.re() > LOG_STD_MAX {
        S::cst(LOG_STD_MAX)
    } else {
        raw
    }
}

/// A sample with its final coefficient in the loss sum (weight times
/// normalization).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Term<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub coef: f64,
}

/// Scratch buffers for one forward/backward pass.
struct Workspace<S: Scalar> {
    acts: Vec<Vec<S>>,
    d_out: Vec<S>,
    d_log_std: Vec<S>,
    buf: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    fn new(layout: &Layout) -> Self {
        let mut acts = vec![vec![S::zero(); layout.input_dim()]];
        acts.extend(layout.layers.iter().map(|l| vec![S::zero(); l.n_out]));
        Self {
            acts,
            d_out: vec![S::zero(); layout.max_width()],
            d_log_std: vec![S::zero(); layout.output_dim()],
            buf: vec![S::zero(); layout.max_width()],
        }
    }

    fn forward(&mut self, params: &[S], layout: &Layout, state: &[f64]) {
        for (a, &s) in self.acts[0].iter_mut().zip(state) {
            *a = S::cst(s);
        }
        let last = layout.layers.len() - 1;
        for (li, l) in layout.layers.iter().enumerate() {
            let (prev, rest) = self.acts.split_at_mut(li + 1);
            let input = &prev[li];
            let out = &mut rest[0];
            for j in 0..l.n_out {
                let row = &params[l.w_off + j * l.n_in..l.w_off + (j + 1) * l.n_in];
                let mut acc = params[l.b_off + j];
                for (w, x) in row.iter().zip(input) {
                    acc += *w * *x;
                }
                out[j] = if li == last { acc } else { acc.tanh() };
            }
        }
    }

    /// Loss of the current forward pass; leaves `dℓ/dμ` in `d_out` and
    /// `dℓ/dlog_std` in `d_log_std`.
    fn loss_and_head_grad(&mut self, params: &[S], layout: &Layout, action: &[f64], kind: LossKind) -> S {
        let mean = &self.acts[layout.layers.len()];
        let mut loss = S::zero();
        for j in 0..layout.output_dim() {
            let r = S::cst(action[j]) - mean[j];
            match kind {
                LossKind::Nll => {
                    let ls = log_std_at(params, layout, j);
                    let inv_var = (ls.scale(-2.0)).exp();
                    loss += (r * r * inv_var).scale(0.5) + ls + S::cst(HALF_LN_2PI);
                    self.d_out[j] = -(r * inv_var);
                    let live = match layout.log_std_off {
                        Some(o) => {
                            let raw = params[o + j].re();
                            (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw)
                        }
                        None => false,
                    };
                    self.d_log_std[j] = if live {
                        S::cst(1.0) - r * r * inv_var
                    } else {
                        S::zero()
                    };
                }
                LossKind::L1 => {
                    // Subgradient of |r| at r = 0 is taken as 0.
                    let sign = if r.re() > 0.0 {
                        1.0
                    } else if r.re() < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    loss += r.scale(sign);
                    self.d_out[j] = S::cst(-sign);
                    self.d_log_std[j] = S::zero();
                }
            }
        }
        loss
    }

    /// Backprop of the head gradients, scaled by `coef`, accumulated into `grad`.
    fn backward(&mut self, params: &[S], layout: &Layout, coef: f64, grad: &mut [S]) {
        if let Some(o) = layout.log_std_off {
            for j in 0..layout.output_dim() {
                grad[o + j] += self.d_log_std[j].scale(coef);
            }
        }
        let last = layout.layers.len() - 1;
        for (li, l) in layout.layers.iter().enumerate().rev() {
            if li != last {
                // through tanh: h' = 1 - h²
                let h = &self.acts[li + 1];
                for j in 0..l.n_out {
                    self.d_out[j] = self.d_out[j] * (S::cst(1.0) - h[j] * h[j]);
                }
            }
            let input = &self.acts[li];
            for j in 0..l.n_out {
                let d = self.d_out[j].scale(coef);
                grad[l.b_off + j] += d;
                let g_row = &mut grad[l.w_off + j * l.n_in..l.w_off + (j + 1) * l.n_in];
                for (g, x) in g_row.iter_mut().zip(input) {
                    *g += d * *x;
                }
            }
            if li > 0 {
                self.buf[..l.n_in].fill(S::zero());
                for j in 0..l.n_out {
                    let d = self.d_out[j];
                    let row = &params[l.w_off + j * l.n_in..l.w_off + (j + 1) * l.n_in];
                    for (b, w) in self.buf[..l.n_in].iter_mut().zip(row) {
                        *b += *w * d;
                    }
                }
                self.d_out[..l.n_in].copy_from_slice(&self.buf[..l.n_in]);
            }
        }
    }

    /// Forward, loss and backward for one term. Returns the unscaled loss.
    fn term(&mut self, params: &[S], layout: &Layout, t: &Term<'_>, kind: LossKind, grad: &mut [S]) -> S {
        self.forward(params, layout, t.state);
        let loss = self.loss_and_head_grad(params, layout, t.action, kind);
        self.backward(params, layout, t.coef, grad);
        loss
    }
}

/// `(Σ coef·loss, Σ coef·∇loss)` over `terms`.
pub(crate) fn batch_grad(params: &[f64], layout: &Layout, terms: &[Term<'_>], kind: LossKind) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = terms
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = Workspace::<f64>::new(layout);
            let mut grad = vec![0.0; layout.len];
            let mut loss = 0.0;
            for t in chunk {
                loss += t.coef * ws.term(params, layout, t, kind, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = vec![0.0; layout.len];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Result of a dual (forward-over-reverse) pass along direction `v`.
pub(crate) struct DualPass {
    /// `Σ coef·∇²loss · v`
    pub hvp: Vec<f64>,
    /// Unscaled directional derivatives `∇loss_iᵀ v`, one per term.
    pub directional: Vec<f64>,
}

pub(crate) fn batch_dual(params: &[f64], v: &[f64], layout: &Layout, terms: &[Term<'_>], kind: LossKind) -> DualPass {
    let dual_params: Vec<Dual> = params.iter().zip(v).map(|(&p, &d)| Dual::new(p, d)).collect();
    let partials: Vec<(Vec<f64>, Vec<Dual>)> = terms
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = Workspace::<Dual>::new(layout);
            let mut grad = vec![Dual::default(); layout.len];
            let dirs = chunk
                .iter()
                .map(|t| ws.term(&dual_params, layout, t, kind, &mut grad).du)
                .collect();
            (dirs, grad)
        })
        .collect();
    let mut hvp = vec![0.0; layout.len];
    let mut directional = Vec::with_capacity(terms.len());
    for (dirs, g) in partials {
        directional.extend(dirs);
        for (h, b) in hvp.iter_mut().zip(&g) {
            *h += b.du;
        }
    }
    DualPass {
        hvp,
        directional,
    }
}

/// Mean-action head used for rollouts.
impl crate::toyenv::Policy for PolicyParams {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        mean_action(self, obs)
    }
}
