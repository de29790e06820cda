//! Turning scores into curated subsets: top-fraction selection, the
//! state/action similarity baselines, random selection and aggregation of
//! fine-grained scores onto coarser clusters.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{resolve_clusters, Cluster, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{rng_for, STREAM_RANDOM_SELECT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub cluster_id: usize,
    pub score: f64,
}

/// One score per cluster plus the labels written to the score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub estimator: String,
    pub target: String,
}

const HEADER: &str = "cluster_id\ttau\trank\testimator\ttarget";

impl ScoreTable {
    pub fn new(scores: &[f64], estimator: &str, target: &str) -> Self {
        Self {
            rows: scores
                .iter()
                .enumerate()
                .map(|(cluster_id, &score)| ScoreRow { cluster_id, score })
                .collect(),
            estimator: estimator.into(),
            target: target.into(),
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row indices ordered best first: score descending, then cluster id.
    fn order(&self) -> Result<Vec<usize>> {
        if let Some(r) = self.rows.iter().find(|r| r.score.is_nan()) {
            return Err(Error::InvalidArgument(format!("score of cluster {} is NaN", r.cluster_id)));
        }
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (&self.rows[a], &self.rows[b]);
            rb.score.total_cmp(&ra.score).then(ra.cluster_id.cmp(&rb.cluster_id))
        });
        Ok(idx)
    }

    /// Rank of each row (1 = best).
    pub fn ranks(&self) -> Result<Vec<usize>> {
        let mut ranks = vec![0; self.rows.len()];
        for (r, i) in self.order()?.into_iter().enumerate() {
            ranks[i] = r + 1;
        }
        Ok(ranks)
    }

    pub fn to_tsv(&self) -> Result<String> {
        let ranks = self.ranks()?;
        let mut out = String::from(HEADER);
        out.push('\n');
        for (row, rank) in self.rows.iter().zip(ranks) {
            // `{:?}` keeps the shortest round-tripping representation
            writeln!(out, "{}\t{:?}\t{}\t{}\t{}", row.cluster_id, row.score, rank, self.estimator, self.target).unwrap();
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == HEADER => {}
            _ => return Err(parse(1, format!("expected header `{HEADER}`"))),
        }
        let mut table = ScoreTable {
            rows: Vec::new(),
            estimator: String::new(),
            target: String::new(),
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(parse(i + 1, format!("expected 5 columns, found {}", f.len())));
            }
            let cluster_id = f[0].parse().map_err(|e| parse(i + 1, format!("cluster_id: {e}")))?;
            let score = f[1].parse().map_err(|e| parse(i + 1, format!("tau: {e}")))?;
            table.estimator = f[3].into();
            table.target = f[4].into();
            table.rows.push(ScoreRow { cluster_id, score });
        }
        Ok(table)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub fraction: f64,
    #[serde(default)]
    pub require_positive: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            fraction: 0.10,
            require_positive: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("fraction {} must lie in (0, 1]", self.fraction)));
        }
        Ok(())
    }
}

/// `max(1, floor(x·n))`.
pub fn selection_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).clamp(1, n.max(1))
}

/// The `k` best cluster ids (score descending, id ascending). With
/// `require_positive`, non-positive scores are dropped first, so fewer than
/// `k` ids may come back.
pub fn select_top_fraction(scores: &ScoreTable, cfg: &SelectionConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument("score table is empty".into()));
    }
    let k = selection_count(scores.len(), cfg.fraction);
    let picked: Vec<usize> = scores
        .order()?
        .into_iter()
        .map(|i| scores.rows[i])
        .filter(|r| !cfg.require_positive || r.score > 0.0)
        .take(k)
        .map(|r| r.cluster_id)
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(picked)
}

/// Uniform sample of `max(1, floor(x·n))` distinct ids, in ascending order.
pub fn random_select(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    SelectionConfig {
        fraction,
        require_positive: false,
    }
    .validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to select from".into()));
    }
    let mut ids = sample(&mut rng_for(seed, &[STREAM_RANDOM_SELECT]), n, selection_count(n, fraction)).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Which features a similarity window compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityMode {
    /// states only
    SR,
    /// actions only
    AR,
    /// states and actions
    BR,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub mode: SimilarityMode,
    pub window: usize,
}

impl SimilarityConfig {
    pub fn new(mode: SimilarityMode) -> Self {
        Self { mode, window: 50 }
    }
}

struct Window {
    traj: usize,
    start: usize,
    features: Vec<f64>,
}

/// Stride-1 windows of `h` steps. A trajectory shorter than `h` yields one
/// window padded by repeating its last step, so all windows have equal length.
fn windows(trajs: &[Trajectory], h: usize, mode: SimilarityMode) -> Vec<Window> {
    let mut out = Vec::new();
    for (ti, t) in trajs.iter().enumerate() {
        let pairs = t.pairs();
        for start in 0..=t.len().saturating_sub(h) {
            let mut features = Vec::new();
            for r in 0..h {
                let p = &pairs[(start + r).min(pairs.len() - 1)];
                if mode != SimilarityMode::AR {
                    features.extend_from_slice(&p.state);
                }
                if mode != SimilarityMode::SR {
                    features.extend_from_slice(&p.action);
                }
            }
            out.push(Window { traj: ti, start, features });
        }
    }
    out
}

/// Each prior window scores `-min_target ‖w - t‖₂`; a cluster takes the best
/// score among windows overlapping its span.
pub fn similarity_scores(
    prior: &[Trajectory],
    clusters: &[Cluster],
    target: &[Trajectory],
    cfg: &SimilarityConfig,
) -> Result<ScoreTable> {
    if cfg.window == 0 {
        return Err(Error::InvalidArgument("similarity window must be at least 1".into()));
    }
    if target.is_empty() {
        return Err(Error::InvalidArgument("similarity needs target demonstrations".into()));
    }
    let h = cfg.window;
    let spans = resolve_clusters(prior, clusters)?;
    let tw = windows(target, h, cfg.mode);
    if let Some(w) = tw.first() {
        let pw0 = windows(&prior[..1.min(prior.len())], h, cfg.mode);
        if pw0.first().is_some_and(|p| p.features.len() != w.features.len()) {
            return Err(Error::Shape("prior and target feature dimensions differ".into()));
        }
    }
    let pw = windows(prior, h, cfg.mode);
    let window_scores: Vec<f64> = pw
        .par_iter()
        .map(|w| {
            let best = tw
                .iter()
                .map(|t| {
                    w.features
                        .iter()
                        .zip(&t.features)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            -best.sqrt()
        })
        .collect();
    let mut by_traj: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, w) in pw.iter().enumerate() {
        by_traj.entry(w.traj).or_default().push(i);
    }
    let scores = spans
        .iter()
        .map(|&(ti, span)| {
            by_traj[&ti]
                .iter()
                .filter(|&&i| {
                    let s = pw[i].start;
                    s < span.start + span.len && span.start < s + h
                })
                .map(|&i| window_scores[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect::<Vec<_>>();
    let name = match cfg.mode {
        SimilarityMode::SR => "sr",
        SimilarityMode::AR => "ar",
        SimilarityMode::BR => "br",
    };
    Ok(ScoreTable::new(&scores, name, "similarity"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    Mean,
}

/// Lifts per-pair scores onto coarser clusters. `pair_scores` is indexed by
/// the cluster ids of `pair_clusters`; every pair covered by `clusters` must
/// have a score.
pub fn aggregate_scores(
    pair_scores: &ScoreTable,
    pair_clusters: &[Cluster],
    clusters: &[Cluster],
    rule: Aggregate,
) -> Result<ScoreTable> {
    let mut lookup = HashMap::new();
    for row in &pair_scores.rows {
        let c = pair_clusters
            .get(row.cluster_id)
            .ok_or_else(|| Error::Shape(format!("no pair cluster {}", row.cluster_id)))?;
        for step in c.span.start..c.span.start + c.span.len {
            lookup.insert((c.span.traj_id, step), row.score);
        }
    }
    let scores = clusters
        .iter()
        .map(|c| {
            let mut sum = 0.0;
            for step in c.span.start..c.span.start + c.span.len {
                sum += lookup.get(&(c.span.traj_id, step)).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "pair ({}, {step}) of cluster {} has no score",
                        c.span.traj_id, c.cluster_id
                    ))
                })?;
            }
            Ok(match rule {
                Aggregate::Sum => sum,
                Aggregate::Mean => sum / c.span.len as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable::new(&scores, &pair_scores.estimator, &pair_scores.target))
}
