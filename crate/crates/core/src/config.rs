//! Run configuration: a TOML file, `key=value` overrides on top, and the
//! hash that names the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Granularity;
use crate::error::{Error, Result};
use crate::estimators::{OutcomeTarget, Ridge};
use crate::policy::{Head, LossKind, PolicyConfig};
use crate::toyenv::{EnvSpec, ObsMode, ACTION_DIM, OBS_DIM};
use crate::trainer::{CoTrain, Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_expert_per_task: usize,
    pub n_noisy_per_task: usize,
    pub noise_sigma: f64,
    pub target_task: usize,
    pub n_target: usize,
    pub seed: u64,
    /// Seed of the estimation/evaluation split of the target demos.
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_expert_per_task: 5,
            n_noisy_per_task: 15,
            noise_sigma: 0.5,
            target_task: 0,
            n_target: 5,
            seed: 0,
            split_seed: 0,
        }
    }
}

/// Training hyperparameters; input and output sizes come from the
/// environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub hidden: Vec<usize>,
    pub head: Head,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss: LossKind,
    pub seed: u64,
    pub checkpoint_stride: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            head: Head::GaussianLearnedLogstd,
            steps: 1000,
            learning_rate: 1e-3,
            batch_size: 64,
            optimizer: Optimizer::adam(),
            loss: LossKind::Nll,
            seed: 1,
            checkpoint_stride: 1000,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, cotrain: Option<CoTrain>) -> TrainConfig {
        let mut policy = PolicyConfig::new(OBS_DIM, ACTION_DIM, self.hidden.clone());
        policy.head = self.head;
        TrainConfig {
            policy,
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            loss: self.loss,
            seed: self.seed,
            cotrain,
            checkpoint_stride: self.checkpoint_stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Regression,
    Metagradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub estimator: EstimatorChoice,
    pub target: OutcomeTarget,
    /// Training runs on random subsets (regression only).
    pub n_subsets: usize,
    /// Extra random subsets for fit statistics; 0 skips them.
    pub n_heldout: usize,
    pub inclusion_prob: f64,
    pub ridge: Ridge,
    pub fit_offset: bool,
    pub seed: u64,
    /// Rollouts per subset when the target is rollout success.
    pub rollouts_per_subset: usize,
    pub rollout_seed: u64,
    pub proxy_loss: LossKind,
    /// Train on the estimation half of the target demos alongside the prior.
    pub include_target_half: bool,
    /// Training for every datamodel run. The metagradient estimator needs
    /// plain gradient steps (`gd_full_batch` or `sgd`).
    pub train: TrainSettings,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorChoice::Metagradient,
            target: OutcomeTarget::ProxyLoss,
            n_subsets: 200,
            n_heldout: 50,
            inclusion_prob: 0.5,
            ridge: Ridge::TraceNormalized(1e-3),
            fit_offset: true,
            seed: 0,
            rollouts_per_subset: 20,
            rollout_seed: 0,
            proxy_loss: LossKind::Nll,
            include_target_half: false,
            train: TrainSettings {
                hidden: vec![16, 16],
                optimizer: Optimizer::GdFullBatch,
                steps: 200,
                learning_rate: 0.2,
                batch_size: 0,
                checkpoint_stride: 1,
                ..TrainSettings::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Datamil,
    Sr,
    Ar,
    Br,
    Random,
    AllData,
    TargetOnly,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Datamil,
        Method::Sr,
        Method::Ar,
        Method::Br,
        Method::Random,
        Method::AllData,
        Method::TargetOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Datamil => "datamil",
            Method::Sr => "sr",
            Method::Ar => "ar",
            Method::Br => "br",
            Method::Random => "random",
            Method::AllData => "all_data",
            Method::TargetOnly => "target_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub methods: Vec<Method>,
    pub fraction: f64,
    pub require_positive: bool,
    pub similarity_window: usize,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            fraction: 0.10,
            require_positive: false,
            similarity_window: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalConfig {
    pub alpha: f64,
    pub train: TrainSettings,
    /// One final policy per seed; success is averaged over them.
    pub train_seeds: Vec<u64>,
    pub eval_rollouts: usize,
    pub eval_seed: u64,
}

impl Default for FinalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            train: TrainSettings {
                steps: 5000,
                ..TrainSettings::default()
            },
            train_seeds: vec![1, 2, 3],
            eval_rollouts: 100,
            eval_seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyStudyConfig {
    pub n_subsets: usize,
    /// Training for the subset policies of the study.
    pub train: TrainSettings,
    /// Co-train each subset policy with the estimation half of the target
    /// demos at this ratio; `None` trains on the prior subset alone.
    pub cotrain_alpha: Option<f64>,
    /// Bernoulli inclusion probability of the study's random subsets.
    pub inclusion_prob: f64,
    pub rollouts_per_subset: usize,
    pub rollout_seed: u64,
    pub seed: u64,
}

impl ProxyStudyConfig {
    pub fn cotrain(&self) -> Option<CoTrain> {
        self.cotrain_alpha.map(|alpha| CoTrain { alpha })
    }
}

impl Default for ProxyStudyConfig {
    fn default() -> Self {
        Self {
            n_subsets: 200,
            train: FinalConfig::default().train,
            cotrain_alpha: Some(0.5),
            inclusion_prob: 0.5,
            rollouts_per_subset: 200,
            rollout_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parent of the run directory; not part of the config hash.
    pub out_dir: PathBuf,
    pub env: EnvSpec,
    pub data: DataConfig,
    pub granularity: Granularity,
    pub estimate: EstimateConfig,
    pub select: SelectConfig,
    #[serde(rename = "final")]
    pub final_: FinalConfig,
    pub proxy_study: ProxyStudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            env: EnvSpec {
                obs_mode: ObsMode::NoGoal,
                ..EnvSpec::default()
            },
            data: DataConfig::default(),
            granularity: Granularity::Trajectory,
            estimate: EstimateConfig::default(),
            select: SelectConfig::default(),
            final_: FinalConfig::default(),
            proxy_study: ProxyStudyConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a table")))?;
    }
    let mut top = toml::Table::new();
    top.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    merge(table, top);
    Ok(())
}

/// Recursively overlays `top` on `base`. Tables carrying a `kind` tag
/// (optimizer, ridge, granularity) replace the base value wholesale so that
/// fields of a different variant do not leak through.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !t.contains_key("kind") => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Reads `path` over the shipped defaults and applies `overrides` in
    /// order. A partial section keeps the defaults of the keys it omits.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| config_err(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| config_err(e.to_string());
        self.env.validate().map_err(wrap)?;
        if self.data.target_task >= self.env.num_tasks {
            return Err(config_err("data.target_task is out of range"));
        }
        if self.data.n_target < 2 {
            return Err(config_err("data.n_target must be at least 2 (the target set is split in halves)"));
        }
        if self.data.n_expert_per_task + self.data.n_noisy_per_task == 0 {
            return Err(config_err("the prior dataset would be empty"));
        }
        if !(self.data.noise_sigma > 0.0) {
            return Err(config_err("data.noise_sigma must be positive"));
        }
        let e = &self.estimate;
        if !(e.inclusion_prob > 0.0 && e.inclusion_prob < 1.0) {
            return Err(config_err("estimate.inclusion_prob must lie strictly between 0 and 1"));
        }
        if !(self.proxy_study.inclusion_prob > 0.0 && self.proxy_study.inclusion_prob < 1.0) {
            return Err(config_err("proxy_study.inclusion_prob must lie strictly between 0 and 1"));
        }
        if e.estimator == EstimatorChoice::Regression && e.n_subsets < 2 {
            return Err(config_err("estimate.n_subsets must be at least 2"));
        }
        if e.estimator == EstimatorChoice::Metagradient {
            if e.target != OutcomeTarget::ProxyLoss {
                return Err(config_err("the metagradient estimator differentiates the proxy; set estimate.target = \"proxy_loss\""));
            }
            if matches!(e.train.optimizer, Optimizer::Adam { .. }) {
                return Err(Error::Unsupported(
                    "metagradient estimation needs gd_full_batch or sgd in estimate.train".into(),
                ));
            }
        }
        e.train.to_train_config(None).validate().map_err(wrap)?;
        self.proxy_study.train.to_train_config(self.proxy_study.cotrain()).validate().map_err(wrap)?;
        if !(self.select.fraction > 0.0 && self.select.fraction <= 1.0) {
            return Err(config_err("select.fraction must lie in (0, 1]"));
        }
        if self.select.similarity_window == 0 {
            return Err(config_err("select.similarity_window must be at least 1"));
        }
        let f = &self.final_;
        f.train
            .to_train_config(Some(CoTrain { alpha: f.alpha }))
            .validate()
            .map_err(wrap)?;
        if f.train_seeds.is_empty() || f.eval_rollouts == 0 {
            return Err(config_err("final.train_seeds and final.eval_rollouts must be non-empty"));
        }
        if self.proxy_study.n_subsets < 3 || self.proxy_study.rollouts_per_subset == 0 {
            return Err(config_err("proxy_study needs at least 3 subsets and 1 rollout per subset"));
        }
        Ok(())
    }

    /// The effective configuration as TOML.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// SHA-256 of the snapshot with `out_dir` blanked.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.snapshot()?.as_bytes())))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir.join(format!("run-{}", &self.hash()?[..12])))
    }
}
