//! Experiment orchestration behind the CLI. Every stage reads and writes
//! inside one run directory named by the config hash:
//!
//! ```text
//! run-<hash>/
//!   config.snapshot      effective merged config (TOML)
//!   run.lock             held while a command runs
//!   data/                prior.jsonl, target.jsonl, clusters.json, manifest.json
//!   scores/              <estimator>.tsv, datamodel.json, sr.tsv, ar.tsv, br.tsv
//!   selections/          <method>.txt, composition.json
//!   checkpoints/         final policies, <method>-seed<k>.json
//!   stages/              per-command results merged into the report
//!   report.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorChoice, Method, RunConfig};
use crate::dataset::{load_trajectories, make_clusters, save_trajectories, split_target, Cluster, SourceTag, SubsetMask, TargetSplit, Trajectory};
use crate::error::{Error, Result};
use crate::estimators::{
    collect_outcomes_multi, evaluate_datamodel, metagradient_estimate, regression_estimate, subset_mask, Datamodel,
    Evaluator, FitStats, OutcomeTarget,
};
use crate::policy::PolicyParams;
use crate::proxy::{proxy_metric, ProxyConfig};
use crate::selection::{random_select, select_top_fraction, similarity_scores, ScoreTable, SelectionConfig, SimilarityConfig, SimilarityMode};
use crate::stats;
use crate::toyenv::{generate_prior, generate_target, rollout_success_rate};
use crate::trainer::{train, CoTrain, TrainingSet};

/// Exclusive ownership of a run directory for the lifetime of the value.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

impl RunDir {
    /// Creates the directory tree, writes the config snapshot and takes the
    /// lock. Fails with [`Error::Locked`] if another process holds it.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.run_dir()?;
        for sub in ["data", "scores", "selections", "checkpoints", "stages"] {
            let d = path.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let lock = path.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(lock)),
            Err(e) => return Err(Error::io(&lock, e)),
        }
        let dir = RunDir { path, lock };
        write_file(&dir.file("config.snapshot"), cfg.snapshot()?.as_bytes())?;
        Ok(dir)
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    fn input(&self, rel: &str) -> Result<PathBuf> {
        let p = self.file(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingInput(p))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Cluster metadata written next to the data so that selection never has to
/// open trajectory files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub cluster: Cluster,
    pub task_id: usize,
    pub source_tag: SourceTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub n_prior: usize,
    pub n_target: usize,
    pub n_prior_pairs: usize,
    pub n_clusters: usize,
    pub estimation_half: Vec<usize>,
    pub evaluation_half: Vec<usize>,
}

/// Everything loaded from `data/`.
pub struct Dataset {
    pub prior: Vec<Trajectory>,
    pub target: Vec<Trajectory>,
    pub clusters: Vec<Cluster>,
    pub split: TargetSplit,
}

fn cluster_infos(prior: &[Trajectory], clusters: &[Cluster]) -> Result<Vec<ClusterInfo>> {
    let index = crate::dataset::traj_index(prior);
    clusters
        .iter()
        .map(|c| {
            let t = &prior[*index
                .get(&c.span.traj_id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown traj_id {}", c.span.traj_id)))?];
            Ok(ClusterInfo {
                cluster: *c,
                task_id: t.task_id,
                source_tag: t.source_tag,
            })
        })
        .collect()
}

/// Generates the prior and target sets and writes them under `data/`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::open(cfg)?;
    let d = &cfg.data;
    let prior = generate_prior(&cfg.env, d.n_expert_per_task, d.n_noisy_per_task, d.noise_sigma, d.seed)?;
    let target = generate_target(&cfg.env, d.target_task, d.n_target, prior.len(), d.seed)?;
    let clusters = make_clusters(&prior, cfg.granularity)?;
    let split = split_target(&target, d.split_seed)?;
    save_trajectories(&prior, dir.file("data/prior.jsonl"))?;
    save_trajectories(&target, dir.file("data/target.jsonl"))?;
    write_json(&dir.file("data/clusters.json"), &cluster_infos(&prior, &clusters)?)?;
    write_json(
        &dir.file("data/manifest.json"),
        &DataManifest {
            n_prior: prior.len(),
            n_target: target.len(),
            n_prior_pairs: prior.iter().map(Trajectory::len).sum(),
            n_clusters: clusters.len(),
            estimation_half: split.estimation_half.iter().map(|t| t.traj_id).collect(),
            evaluation_half: split.evaluation_half.iter().map(|t| t.traj_id).collect(),
        },
    )?;
    info!("wrote {} prior and {} target trajectories", prior.len(), target.len());
    Ok(dir.path.clone())
}

fn load_dataset(dir: &RunDir, cfg: &RunConfig) -> Result<Dataset> {
    let prior = load_trajectories(dir.input("data/prior.jsonl")?)?;
    let target = load_trajectories(dir.input("data/target.jsonl")?)?;
    let infos: Vec<ClusterInfo> = read_json(&dir.input("data/clusters.json")?)?;
    let clusters = infos.into_iter().map(|i| i.cluster).collect();
    let split = split_target(&target, cfg.data.split_seed)?;
    Ok(Dataset {
        prior,
        target,
        clusters,
        split,
    })
}

fn proxy_config(cfg: &RunConfig) -> ProxyConfig {
    ProxyConfig::uniform(cfg.estimate.proxy_loss)
}

/// Summary written by `estimate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateStage {
    pub estimator: String,
    pub target: String,
    pub n_clusters: usize,
    pub skipped_subsets: usize,
    pub fit: Option<FitStats>,
    pub seconds: f64,
}

fn rollout_eval<'a>(cfg: &'a RunConfig, n: usize, seed: u64) -> Evaluator<'a> {
    Evaluator::Rollouts {
        env: &cfg.env,
        task_id: cfg.data.target_task,
        n_rollouts: n,
        seed,
    }
}

/// Fits the configured datamodel and writes its score table, plus the
/// similarity baselines requested in `select.methods`.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::open(cfg)?;
    let ds = load_dataset(&dir, cfg)?;
    let start = Instant::now();
    let e = &cfg.estimate;
    let est: &[Trajectory] = if e.include_target_half { &ds.split.estimation_half } else { &[] };
    let data = TrainingSet::new(&ds.prior, &ds.clusters, est);
    let pc = proxy_config(cfg);
    let proxy_eval = Evaluator::Proxy {
        target_eval: &ds.split.evaluation_half,
        cfg: &pc,
    };
    let eval = match e.target {
        OutcomeTarget::ProxyLoss => proxy_eval,
        OutcomeTarget::RolloutSuccess => rollout_eval(cfg, e.rollouts_per_subset, e.rollout_seed),
    };
    let (mut dm, skipped) = match e.estimator {
        EstimatorChoice::Regression => {
            let masks = (0..e.n_subsets)
                .map(|j| subset_mask(ds.clusters.len(), e.inclusion_prob, e.seed, j))
                .collect::<Result<Vec<_>>>()?;
            let outs = collect_outcomes_multi(&data, masks, &e.train.to_train_config(None), &[eval])?.remove(0);
            let mut dm = regression_estimate(&outs.outcomes, e.ridge, e.fit_offset)?;
            dm.provenance.skipped_subsets = outs.skipped;
            dm.provenance.seeds = vec![e.seed, e.train.seed];
            dm.provenance.inclusion_prob = Some(e.inclusion_prob);
            dm.provenance.train_steps = e.train.steps;
            dm.provenance.optimizer = e.train.optimizer.name().into();
            dm.target = e.target;
            (dm, outs.skipped)
        }
        EstimatorChoice::Metagradient => {
            let dm = metagradient_estimate(&data, &ds.split.evaluation_half, &e.train.to_train_config(None), &pc)?;
            (dm, 0)
        }
    };
    if e.include_target_half {
        dm.provenance.notes.push("target estimation half trained alongside the prior".into());
    }
    let fit = if e.n_heldout >= 3 {
        let masks = (0..e.n_heldout)
            .map(|j| subset_mask(ds.clusters.len(), e.inclusion_prob, e.seed, e.n_subsets + j))
            .collect::<Result<Vec<_>>>()?;
        let held = collect_outcomes_multi(&data, masks, &e.train.to_train_config(None), &[eval])?.remove(0);
        Some(evaluate_datamodel(&dm, &held.outcomes)?)
    } else {
        None
    };
    let name = dm.estimator.as_str();
    let table = ScoreTable::new(&dm.tau, name, dm.target.as_str());
    table.save(dir.file(&format!("scores/{name}.tsv")))?;
    write_json(&dir.file("scores/datamodel.json"), &dm)?;
    for (method, mode) in [(Method::Sr, SimilarityMode::SR), (Method::Ar, SimilarityMode::AR), (Method::Br, SimilarityMode::BR)] {
        if cfg.select.methods.contains(&method) {
            let sc = SimilarityConfig {
                mode,
                window: cfg.select.similarity_window,
            };
            similarity_scores(&ds.prior, &ds.clusters, &ds.target, &sc)?.save(dir.file(&format!("scores/{}.tsv", method.as_str())))?;
        }
    }
    write_json(
        &dir.file("stages/estimate.json"),
        &EstimateStage {
            estimator: name.into(),
            target: dm.target.as_str().into(),
            n_clusters: ds.clusters.len(),
            skipped_subsets: skipped,
            fit,
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(dir.file(&format!("scores/{name}.tsv")))
}

/// Share of a selection falling in one `(task_id, source_tag)` group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionEntry {
    pub task_id: usize,
    pub source_tag: SourceTag,
    pub count: usize,
    pub fraction: f64,
}

/// Groups selected clusters by `(task_id, source_tag)`; fractions sum to 1
/// for a non-empty selection.
pub fn composition(infos: &[ClusterInfo], selected: &[usize]) -> Vec<CompositionEntry> {
    let mut groups: BTreeMap<(usize, &'static str), (SourceTag, usize)> = BTreeMap::new();
    for &id in selected {
        let i = &infos[id];
        groups.entry((i.task_id, i.source_tag.as_str())).or_insert((i.source_tag, 0)).1 += 1;
    }
    let n = selected.len();
    groups
        .into_iter()
        .map(|((task_id, _), (source_tag, count))| CompositionEntry {
            task_id,
            source_tag,
            count,
            fraction: count as f64 / n as f64,
        })
        .collect()
}

/// One method's selected clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: Method,
    pub cluster_ids: Vec<usize>,
    /// Train on target demonstrations only.
    pub target_only: bool,
}

impl Selection {
    pub fn to_text(&self) -> String {
        let mut s = format!("# method={} target_only={}\n", self.method.as_str(), self.target_only);
        for id in &self.cluster_ids {
            s.push_str(&format!("{id}\n"));
        }
        s
    }

    pub fn load(path: &Path, method: Method) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sel = Selection {
            method,
            cluster_ids: Vec::new(),
            target_only: false,
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(h) = line.strip_prefix('#') {
                sel.target_only |= h.contains("target_only=true");
            } else if !line.is_empty() {
                sel.cluster_ids.push(line.parse().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("cluster id: {e}"),
                })?);
            }
        }
        Ok(sel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub method: Method,
    pub n_selected: usize,
    pub target_only: bool,
    pub composition: Vec<CompositionEntry>,
}

/// Turns score files and cluster metadata into one selection per method.
pub fn cmd_select(cfg: &RunConfig) -> Result<Vec<Selection>> {
    let dir = RunDir::open(cfg)?;
    let infos: Vec<ClusterInfo> = read_json(&dir.input("data/clusters.json")?)?;
    let n = infos.len();
    let sc = SelectionConfig {
        fraction: cfg.select.fraction,
        require_positive: cfg.select.require_positive,
    };
    let top = |file: &str, sc: &SelectionConfig| -> Result<Vec<usize>> {
        let table = ScoreTable::load(dir.input(file)?)?;
        if table.len() != n {
            return Err(Error::Shape(format!("{file} has {} rows for {n} clusters", table.len())));
        }
        select_top_fraction(&table, sc)
    };
    let plain = SelectionConfig {
        require_positive: false,
        ..sc
    };
    let mut out = Vec::new();
    let mut summary = Vec::new();
    for &method in &cfg.select.methods {
        let (ids, target_only) = match method {
            Method::Datamil => {
                let name = match cfg.estimate.estimator {
                    EstimatorChoice::Regression => "regression",
                    EstimatorChoice::Metagradient => "metagradient",
                };
                (top(&format!("scores/{name}.tsv"), &sc)?, false)
            }
            Method::Sr | Method::Ar | Method::Br => (top(&format!("scores/{}.tsv", method.as_str()), &plain)?, false),
            Method::Random => (random_select(n, cfg.select.fraction, cfg.select.seed)?, false),
            Method::AllData => ((0..n).collect(), false),
            Method::TargetOnly => (Vec::new(), true),
        };
        let sel = Selection {
            method,
            cluster_ids: ids,
            target_only,
        };
        write_file(&dir.file(&format!("selections/{}.txt", method.as_str())), sel.to_text().as_bytes())?;
        summary.push(SelectionSummary {
            method,
            n_selected: sel.cluster_ids.len(),
            target_only,
            composition: composition(&infos, &sel.cluster_ids),
        });
        out.push(sel);
    }
    write_json(&dir.file("selections/composition.json"), &summary)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub n_selected: usize,
    pub success_per_seed: Vec<f64>,
    pub mean_success: f64,
    pub proxy_per_seed: Vec<f64>,
    pub mean_proxy: f64,
}

/// Co-trains one final policy on `selection` plus all target demos.
pub fn train_final(cfg: &RunConfig, ds: &Dataset, selection: &Selection, seed: u64) -> Result<PolicyParams> {
    let mut settings = cfg.final_.train.clone();
    settings.seed = seed;
    let tc = settings.to_train_config(Some(CoTrain { alpha: cfg.final_.alpha }));
    let mask = SubsetMask::from_selected(ds.clusters.len(), &selection.cluster_ids)?;
    let data = TrainingSet::new(&ds.prior, &ds.clusters, &ds.target);
    Ok(train(&data, &mask, &tc)?.0)
}

/// Trains and evaluates a final policy for every selection.
pub fn cmd_train_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::open(cfg)?;
    let ds = load_dataset(&dir, cfg)?;
    let start = Instant::now();
    let pc = proxy_config(cfg);
    let mut results = Vec::new();
    for &method in &cfg.select.methods {
        let sel = Selection::load(&dir.input(&format!("selections/{}.txt", method.as_str()))?, method)?;
        let mut success = Vec::new();
        let mut proxy = Vec::new();
        for &seed in &cfg.final_.train_seeds {
            let params = train_final(cfg, &ds, &sel, seed)?;
            write_json(&dir.file(&format!("checkpoints/{}-seed{seed}.json", method.as_str())), &params)?;
            success.push(rollout_success_rate(
                &params,
                &cfg.env,
                cfg.data.target_task,
                cfg.final_.eval_rollouts,
                cfg.final_.eval_seed,
            )?);
            proxy.push(proxy_metric(&params, &ds.split.evaluation_half, &pc)?);
        }
        results.push(MethodResult {
            method,
            n_selected: sel.cluster_ids.len(),
            mean_success: stats::mean(&success),
            mean_proxy: stats::mean(&proxy),
            success_per_seed: success,
            proxy_per_seed: proxy,
        });
    }
    write_json(
        &dir.file("stages/train_eval.json"),
        &TrainEvalStage {
            methods: results,
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    drop(dir);
    cmd_report(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEvalStage {
    pub methods: Vec<MethodResult>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub subset: usize,
    pub rollout_success: f64,
    pub proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyVariant {
    pub name: String,
    pub selected: Vec<usize>,
    pub composition: Vec<CompositionEntry>,
    pub success_per_seed: Vec<f64>,
    pub mean_success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyStudyStage {
    pub rows: Vec<StudyRow>,
    pub skipped_subsets: usize,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    /// DM-rollouts, DataMIL-rg, DataMIL-meta, then the all-data reference.
    pub variants: Vec<StudyVariant>,
    pub seconds: f64,
}

fn evaluate_variant(cfg: &RunConfig, ds: &Dataset, infos: &[ClusterInfo], name: &str, ids: Vec<usize>) -> Result<StudyVariant> {
    let sel = Selection {
        method: Method::Datamil,
        cluster_ids: ids,
        target_only: false,
    };
    let success = cfg
        .final_
        .train_seeds
        .iter()
        .map(|&seed| {
            let p = train_final(cfg, ds, &sel, seed)?;
            rollout_success_rate(&p, &cfg.env, cfg.data.target_task, cfg.final_.eval_rollouts, cfg.final_.eval_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyVariant {
        name: name.into(),
        composition: composition(infos, &sel.cluster_ids),
        selected: sel.cluster_ids,
        mean_success: stats::mean(&success),
        success_per_seed: success,
    })
}

/// Trains on random subsets, records rollout success `M` and proxy `M̂` for
/// each, and compares selections from datamodels fit on `M` (regression),
/// on `M̂` (regression) and by metagradient against the all-data policy.
pub fn cmd_proxy_study(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::open(cfg)?;
    let ds = load_dataset(&dir, cfg)?;
    let infos: Vec<ClusterInfo> = read_json(&dir.input("data/clusters.json")?)?;
    let start = Instant::now();
    let e = &cfg.estimate;
    let ps = &cfg.proxy_study;
    let est: &[Trajectory] = if e.include_target_half { &ds.split.estimation_half } else { &[] };
    let data = TrainingSet::new(&ds.prior, &ds.clusters, est);
    let study_target: &[Trajectory] = if ps.cotrain_alpha.is_some() { &ds.split.estimation_half } else { est };
    let study_data = TrainingSet::new(&ds.prior, &ds.clusters, study_target);
    let pc = proxy_config(cfg);
    let evals = [
        rollout_eval(cfg, ps.rollouts_per_subset, ps.rollout_seed),
        Evaluator::Proxy {
            target_eval: &ds.split.evaluation_half,
            cfg: &pc,
        },
    ];
    let masks = (0..ps.n_subsets)
        .map(|j| subset_mask(ds.clusters.len(), ps.inclusion_prob, ps.seed, j))
        .collect::<Result<Vec<_>>>()?;
    let mut outs = collect_outcomes_multi(&study_data, masks, &ps.train.to_train_config(ps.cotrain()), &evals)?;
    let proxy_outs = outs.pop().expect("two evaluators");
    let rollout_outs = outs.pop().expect("two evaluators");
    let rows: Vec<StudyRow> = rollout_outs
        .outcomes
        .iter()
        .zip(&proxy_outs.outcomes)
        .enumerate()
        .map(|(subset, (m, mh))| StudyRow {
            subset,
            rollout_success: m.outcome,
            proxy: mh.outcome,
        })
        .collect();
    let m: Vec<f64> = rows.iter().map(|r| r.rollout_success).collect();
    let mh: Vec<f64> = rows.iter().map(|r| r.proxy).collect();
    let sc = SelectionConfig {
        fraction: cfg.select.fraction,
        require_positive: cfg.select.require_positive,
    };
    let pick = |dm: &Datamodel| select_top_fraction(&ScoreTable::new(&dm.tau, "", ""), &sc);
    let dm_rollouts = regression_estimate(&rollout_outs.outcomes, e.ridge, e.fit_offset)?;
    let dm_rg = regression_estimate(&proxy_outs.outcomes, e.ridge, e.fit_offset)?;
    let dm_meta = metagradient_estimate(&data, &ds.split.evaluation_half, &e.train.to_train_config(None), &pc)?;
    let n = ds.clusters.len();
    let variants = vec![
        evaluate_variant(cfg, &ds, &infos, "dm_rollouts", pick(&dm_rollouts)?)?,
        evaluate_variant(cfg, &ds, &infos, "datamil_rg", pick(&dm_rg)?)?,
        evaluate_variant(cfg, &ds, &infos, "datamil_meta", pick(&dm_meta)?)?,
        evaluate_variant(cfg, &ds, &infos, "all_data", (0..n).collect())?,
    ];
    write_json(
        &dir.file("stages/proxy_study.json"),
        &ProxyStudyStage {
            spearman: stats::spearman(&mh, &m),
            pearson: stats::pearson(&mh, &m),
            rows,
            skipped_subsets: rollout_outs.skipped,
            variants,
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    drop(dir);
    cmd_report(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub estimate_seconds: Option<f64>,
    pub train_eval_seconds: Option<f64>,
    pub proxy_study_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub version: String,
    pub data: Option<DataManifest>,
    pub estimate: Option<EstimateStage>,
    pub selections: Option<Vec<SelectionSummary>>,
    pub methods: Option<Vec<MethodResult>>,
    pub proxy_study: Option<ProxyStudyStage>,
    /// Wall-clock measurements; the only part that varies between reruns.
    pub timings: Timings,
}

impl Report {
    /// The report with every timing field cleared, for reproducibility checks.
    pub fn without_timings(&self) -> Report {
        let mut r = self.clone();
        r.timings = Timings {
            estimate_seconds: None,
            train_eval_seconds: None,
            proxy_study_seconds: None,
        };
        if let Some(e) = &mut r.estimate {
            e.seconds = 0.0;
        }
        if let Some(p) = &mut r.proxy_study {
            p.seconds = 0.0;
        }
        r
    }
}

fn optional<T: for<'de> Deserialize<'de>>(path: PathBuf) -> Result<Option<T>> {
    if path.exists() {
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

/// Assembles `report.json` from whatever stages have run.
pub fn cmd_report(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::open(cfg)?;
    let estimate: Option<EstimateStage> = optional(dir.file("stages/estimate.json"))?;
    let train_eval: Option<TrainEvalStage> = optional(dir.file("stages/train_eval.json"))?;
    let proxy_study: Option<ProxyStudyStage> = optional(dir.file("stages/proxy_study.json"))?;
    let report = Report {
        config_hash: cfg.hash()?,
        version: env!("CARGO_PKG_VERSION").into(),
        data: optional(dir.file("data/manifest.json"))?,
        selections: optional(dir.file("selections/composition.json"))?,
        timings: Timings {
            estimate_seconds: estimate.as_ref().map(|e| e.seconds),
            train_eval_seconds: train_eval.as_ref().map(|t| t.seconds),
            proxy_study_seconds: proxy_study.as_ref().map(|p| p.seconds),
        },
        estimate,
        methods: train_eval.map(|t| t.methods),
        proxy_study,
    };
    let path = dir.file("report.json");
    write_json(&path, &report)?;
    Ok(path)
}

/// Runs gen-data, estimate, select and train-eval in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Report> {
    cmd_gen_data(cfg)?;
    cmd_estimate(cfg)?;
    cmd_select(cfg)?;
    let path = cmd_train_eval(cfg)?;
    read_json(&path)
}

pub fn load_report(path: &Path) -> Result<Report> {
    read_json(path)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Plain-text summary of a report.
pub fn render_report(r: &Report) -> String {
    let mut s = format!("config {}  (datamil {})\n", &r.config_hash[..12], r.version);
    if let Some(d) = &r.data {
        s += &format!("data: {} prior trajectories ({} pairs), {} target, {} clusters\n", d.n_prior, d.n_prior_pairs, d.n_target, d.n_clusters);
    }
    if let Some(e) = &r.estimate {
        s += &format!("datamodel: {} on {}", e.estimator, e.target);
        if let Some(f) = &e.fit {
            s += &format!(", held-out spearman {} pearson {} (n={})", fmt_opt(f.spearman), fmt_opt(f.pearson), f.n);
        }
        s.push('\n');
    }
    if let Some(ms) = &r.methods {
        s += "method        selected  success  proxy\n";
        for m in ms {
            s += &format!("{:<13} {:>8}  {:>7.3}  {:>6.3}\n", m.method.as_str(), m.n_selected, m.mean_success, m.mean_proxy);
        }
    }
    if let Some(p) = &r.proxy_study {
        s += &format!("proxy study: {} subsets, spearman(proxy, success) = {}\n", p.rows.len(), fmt_opt(p.spearman));
        for v in &p.variants {
            s += &format!("  {:<13} success {:.3}\n", v.name, v.mean_success);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_sums_to_one() {
        let info = |task_id, source_tag| ClusterInfo {
            cluster: Cluster {
                cluster_id: 0,
                granularity: crate::dataset::Granularity::Trajectory,
                span: crate::dataset::Span {
                    traj_id: 0,
                    start: 0,
                    len: 1,
                },
            },
            task_id,
            source_tag,
        };
        let infos = vec![info(0, SourceTag::Expert), info(0, SourceTag::Suboptimal), info(1, SourceTag::Expert)];
        let c = composition(&infos, &[0, 1, 2]);
        assert_eq!(c.len(), 3);
        assert!((c.iter().map(|e| e.fraction).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn selection_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        for sel in [
            Selection {
                method: Method::Datamil,
                cluster_ids: vec![4, 1, 9],
                target_only: false,
            },
            Selection {
                method: Method::TargetOnly,
                cluster_ids: vec![],
                target_only: true,
            },
        ] {
            fs::write(&p, sel.to_text()).unwrap();
            assert_eq!(Selection::load(&p, sel.method).unwrap(), sel);
        }
    }
}
