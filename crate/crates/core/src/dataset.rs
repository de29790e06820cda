//! Demonstration data: trajectories, attribution clusters, subset masks and
//! their on-disk formats.
//!
//! Trajectory files hold one JSON record per line:
//!
//! ```text
//! {"traj_id":0,"task_id":3,"source_tag":"expert","states":[[...],...],"actions":[[...],...]}
//! ```
//!
//! Numbers are written in shortest round-trip form, so `save` followed by
//! `load` reproduces every value bit for bit.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Where a trajectory came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Expert,
    Suboptimal,
    Target,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Expert => "expert",
            SourceTag::Suboptimal => "suboptimal",
            SourceTag::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateActionPair {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub task_id: usize,
    pub traj_id: usize,
    pub step_idx: usize,
}

/// An ordered, non-empty sequence of state-action pairs from one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub traj_id: usize,
    pub task_id: usize,
    pub source_tag: SourceTag,
    pairs: Vec<StateActionPair>,
}

impl Trajectory {
    /// Builds a trajectory from parallel state and action rows.
    pub fn new(
        traj_id: usize,
        task_id: usize,
        source_tag: SourceTag,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "trajectory {traj_id} is empty"
            )));
        }
        if states.len() != actions.len() {
            return Err(Error::Shape(format!(
                "trajectory {traj_id}: {} states but {} actions",
                states.len(),
                actions.len()
            )));
        }
        let (sd, ad) = (states[0].len(), actions[0].len());
        if sd == 0 || ad == 0 {
            return Err(Error::Shape(format!(
                "trajectory {traj_id}: zero-dimensional state or action"
            )));
        }
        let mut pairs = Vec::with_capacity(states.len());
        for (step_idx, (state, action)) in states.into_iter().zip(actions).enumerate() {
            if state.len() != sd || action.len() != ad {
                return Err(Error::Shape(format!(
                    "trajectory {traj_id}: ragged rows at step {step_idx}"
                )));
            }
            if state.iter().chain(&action).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "trajectory {traj_id}: non-finite value at step {step_idx}"
                )));
            }
            pairs.push(StateActionPair {
                state,
                action,
                task_id,
                traj_id,
                step_idx,
            });
        }
        Ok(Self {
            traj_id,
            task_id,
            source_tag,
            pairs,
        })
    }

    pub fn pairs(&self) -> &[StateActionPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.pairs[0].state.len()
    }

    pub fn action_dim(&self) -> usize {
        self.pairs[0].action.len()
    }

    fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            traj_id: self.traj_id,
            task_id: self.task_id,
            source_tag: self.source_tag,
            states: self.pairs.iter().map(|p| p.state.clone()).collect(),
            actions: self.pairs.iter().map(|p| p.action.clone()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    traj_id: usize,
    task_id: usize,
    source_tag: SourceTag,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

/// Reads a trajectory file. Blank lines are ignored; any other line must be
/// a complete record whose state and action dimensions agree with the first
/// record in the file.
pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let state_dim = rec.states.first().map_or(0, Vec::len);
        let action_dim = rec.actions.first().map_or(0, Vec::len);
        if let Some((sd, ad)) = dims {
            if state_dim != sd {
                return Err(Error::DimensionMismatch {
                    line: lineno,
                    what: "state",
                    expected: sd,
                    found: state_dim,
                });
            }
            if action_dim != ad {
                return Err(Error::DimensionMismatch {
                    line: lineno,
                    what: "action",
                    expected: ad,
                    found: action_dim,
                });
            }
        } else {
            dims = Some((state_dim, action_dim));
        }
        let traj = Trajectory::new(
            rec.traj_id,
            rec.task_id,
            rec.source_tag,
            rec.states,
            rec.actions,
        )
        .map_err(|e| parse_err(e.to_string()))?;
        out.push(traj);
    }
    Ok(out)
}

pub fn save_trajectories(trajs: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        serde_json::to_writer(&mut w, &t.to_record())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Temporal scale at which pairs are grouped into attribution units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Granularity {
    Trajectory,
    Subtrajectory { horizon: usize },
    Pair,
}

/// A contiguous run of steps inside one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub traj_id: usize,
    pub start: usize,
    pub len: usize,
}

/// One attribution unit; `cluster_id` is the index of its coordinate in a
/// [`SubsetMask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: usize,
    pub granularity: Granularity,
    pub span: Span,
}

/// Partitions every pair of `dataset` into clusters ordered by
/// `(traj_id, start)`. Sub-trajectory spans have length `horizon` except the
/// last one in each trajectory, which keeps the remainder.
pub fn make_clusters(dataset: &[Trajectory], granularity: Granularity) -> Result<Vec<Cluster>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot cluster an empty dataset".into(),
        ));
    }
    let step = match granularity {
        Granularity::Trajectory => usize::MAX,
        Granularity::Subtrajectory { horizon: 0 } => {
            return Err(Error::InvalidArgument(
                "sub-trajectory horizon must be at least 1".into(),
            ))
        }
        Granularity::Subtrajectory { horizon } => horizon,
        Granularity::Pair => 1,
    };
    let mut order: Vec<&Trajectory> = dataset.iter().collect();
    order.sort_by_key(|t| t.traj_id);
    if let Some(w) = order.windows(2).find(|w| w[0].traj_id == w[1].traj_id) {
        return Err(Error::InvalidArgument(format!(
            "duplicate traj_id {}",
            w[0].traj_id
        )));
    }
    let mut clusters = Vec::new();
    for t in order {
        let mut start = 0;
        while start < t.len() {
            let len = step.min(t.len() - start);
            clusters.push(Cluster {
                cluster_id: clusters.len(),
                granularity,
                span: Span {
                    traj_id: t.traj_id,
                    start,
                    len,
                },
            });
            start += len;
        }
    }
    Ok(clusters)
}

/// Maps `traj_id` to its position in `dataset`.
pub fn traj_index(dataset: &[Trajectory]) -> HashMap<usize, usize> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, t)| (t.traj_id, i))
        .collect()
}

/// Resolves each cluster to `(trajectory position, span)`; fails if a cluster
/// points outside the dataset.
pub fn resolve_clusters(
    dataset: &[Trajectory],
    clusters: &[Cluster],
) -> Result<Vec<(usize, Span)>> {
    let index = traj_index(dataset);
    clusters
        .iter()
        .map(|c| {
            let &ti = index.get(&c.span.traj_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "cluster {} references unknown traj_id {}",
                    c.cluster_id, c.span.traj_id
                ))
            })?;
            if c.span.start + c.span.len > dataset[ti].len() || c.span.len == 0 {
                return Err(Error::InvalidArgument(format!(
                    "cluster {} span exceeds trajectory {}",
                    c.cluster_id, c.span.traj_id
                )));
            }
            Ok((ti, c.span))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Binary,
    Continuous,
}

/// Per-cluster data weights `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMask {
    pub kind: MaskKind,
    weights: Vec<f64>,
}

impl SubsetMask {
    pub fn binary(bits: &[bool]) -> Self {
        Self {
            kind: MaskKind::Binary,
            weights: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn continuous(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidArgument(format!(
                "mask weight {w} outside [0, 1]"
            )));
        }
        Ok(Self {
            kind: MaskKind::Continuous,
            weights,
        })
    }

    /// Continuous weights without the `[0, 1]` range check; finite-difference
    /// probes step slightly outside the unit box.
    pub fn continuous_unchecked(weights: Vec<f64>) -> Self {
        Self {
            kind: MaskKind::Continuous,
            weights,
        }
    }

    /// The all-ones binary mask `z_0`.
    pub fn ones(n: usize) -> Self {
        Self::binary(&vec![true; n])
    }

    /// Binary mask with exactly the listed cluster ids switched on.
    pub fn from_selected(n: usize, ids: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &id in ids {
            *bits.get_mut(id).ok_or_else(|| {
                Error::InvalidArgument(format!("cluster id {id} out of range for {n} clusters"))
            })? = true;
        }
        Ok(Self::binary(&bits))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_on(&self, i: usize) -> bool {
        self.weights[i] != 0.0
    }

    pub fn count_on(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// Reinterprets the weights as continuous (same values).
    pub fn to_continuous(&self) -> Self {
        Self {
            kind: MaskKind::Continuous,
            weights: self.weights.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MaskKind::Binary if self.weights.iter().any(|&w| w != 0.0 && w != 1.0) => Err(
                Error::InvalidArgument("binary mask holds a non-binary weight".into()),
            ),
            _ if self.weights.iter().any(|w| !w.is_finite()) => Err(Error::InvalidArgument(
                "mask holds a non-finite weight".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mask: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        mask.validate()?;
        Ok(mask)
    }
}

/// Draws `z ~ Bernoulli(p)^n`.
pub fn sample_bernoulli_mask(n: usize, p: f64, seed: u64) -> Result<SubsetMask> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inclusion probability {p} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = rng::rng_for(seed, &[rng::STREAM_MASK]);
    let bits: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
    Ok(SubsetMask::binary(&bits))
}

/// Target demonstrations split into a half used during estimation and a half
/// reserved for evaluating the proxy metric.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSplit {
    pub estimation_half: Vec<Trajectory>,
    pub evaluation_half: Vec<Trajectory>,
    pub seed: u64,
}

/// Shuffles the target set with `seed`; the estimation half receives
/// `ceil(n/2)` trajectories. Both halves keep the input order.
pub fn split_target(target: &[Trajectory], seed: u64) -> Result<TargetSplit> {
    if target.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 target trajectories to split, got {}",
            target.len()
        )));
    }
    let mut idx: Vec<usize> = (0..target.len()).collect();
    idx.shuffle(&mut rng::rng_for(seed, &[rng::STREAM_SPLIT]));
    let cut = target.len().div_ceil(2);
    let mut first = idx[..cut].to_vec();
    let mut second = idx[cut..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok(TargetSplit {
        estimation_half: first.iter().map(|&i| target[i].clone()).collect(),
        evaluation_half: second.iter().map(|&i| target[i].clone()).collect(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: usize, task: usize, len: usize) -> Trajectory {
        let states = (0..len).map(|i| vec![i as f64, id as f64]).collect();
        let actions = (0..len).map(|i| vec![0.1 * i as f64]).collect();
        Trajectory::new(id, task, SourceTag::Expert, states, actions).unwrap()
    }

    #[test]
    fn subtrajectory_clusters_keep_remainder() {
        let c = make_clusters(&[traj(0, 0, 50)], Granularity::Subtrajectory { horizon: 15 }).unwrap();
        let sizes: Vec<_> = c.iter().map(|c| c.span.len).collect();
        assert_eq!(sizes, vec![15, 15, 15, 5]);
        let c = make_clusters(&[traj(0, 0, 15)], Granularity::Subtrajectory { horizon: 15 }).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].span.len, 15);
    }

    #[test]
    fn trajectory_clusters_follow_traj_id_order() {
        let data: Vec<_> = (0..7).rev().map(|i| traj(i, 0, 3 + i)).collect();
        let c = make_clusters(&data, Granularity::Trajectory).unwrap();
        assert_eq!(c.len(), 7);
        for (i, cl) in c.iter().enumerate() {
            assert_eq!(cl.cluster_id, i);
            assert_eq!(cl.span.traj_id, i);
            assert_eq!(cl.span.len, 3 + i);
        }
    }

    #[test]
    fn zero_horizon_rejected() {
        let err = make_clusters(&[traj(0, 0, 5)], Granularity::Subtrajectory { horizon: 0 });
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(make_clusters(&[], Granularity::Pair).is_err());
    }

    #[test]
    fn bernoulli_mask_contract() {
        let a = sample_bernoulli_mask(4, 0.5, 11).unwrap();
        assert_eq!(a, sample_bernoulli_mask(4, 0.5, 11).unwrap());
        assert_eq!(a.kind, MaskKind::Binary);
        assert!(sample_bernoulli_mask(4, 1.0, 11).is_err());
        assert!(sample_bernoulli_mask(4, 0.0, 11).is_err());
    }

    #[test]
    fn split_sizes() {
        let ten: Vec<_> = (0..10).map(|i| traj(i, 0, 2)).collect();
        let s = split_target(&ten, 3).unwrap();
        assert_eq!((s.estimation_half.len(), s.evaluation_half.len()), (5, 5));
        for t in &s.estimation_half {
            assert!(!s.evaluation_half.iter().any(|u| u.traj_id == t.traj_id));
        }
        assert_eq!(s, split_target(&ten, 3).unwrap());
        let s = split_target(&ten[..5], 3).unwrap();
        assert_eq!((s.estimation_half.len(), s.evaluation_half.len()), (3, 2));
        assert!(split_target(&ten[..1], 3).is_err());
    }

    #[test]
    fn mask_from_selected() {
        let m = SubsetMask::from_selected(4, &[1, 3]).unwrap();
        assert_eq!(m.weights(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(SubsetMask::from_selected(4, &[4]).is_err());
        assert!(SubsetMask::continuous(vec![0.5, 1.2]).is_err());
    }
}
