//! Dominance, non-dominated sorting, crowding distance, the Pareto archive,
//! objective normalization and exact hypervolume.
//!
//! All vectors are in minimization form. Objective vectors are mapped to
//! `[params, cost, 1 - precision, 1 - recall]` before comparison.

pub mod export;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::ObjectiveVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MooError {
    #[error("vectors have different lengths ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cannot fit a normalizer to an empty set")]
    EmptySet,
    #[error("point {index} lies outside the unit box")]
    PointOutOfBox { index: usize },
    #[error("exact hypervolume supports at most 4 objectives, got {0}")]
    TooManyObjectives(usize),
}

/// `a` is no worse than `b` everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool, MooError> {
    if a.len() != b.len() {
        return Err(MooError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(dominates_unchecked(a, b))
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// Fronts of point indices; front 0 is the non-dominated set.
pub fn non_dominated_sort<P: AsRef<[f64]>>(points: &[P]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            if dominates_unchecked(a, b) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates_unchecked(b, a) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front` (indices into `points`),
/// returned in the order of `front`. Boundary points are infinite; each
/// objective contributes its neighbour gap divided by the objective's range.
pub fn crowding_distance<P: AsRef<[f64]>>(points: &[P], front: &[usize]) -> Vec<f64> {
    let m = front.len();
    let mut dist = vec![0.0; m];
    if m <= 2 {
        return vec![f64::INFINITY; m];
    }
    let dims = points[front[0]].as_ref().len();
    for k in 0..dims {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| points[front[a]].as_ref()[k].total_cmp(&points[front[b]].as_ref()[k]));
        let lo = points[front[order[0]]].as_ref()[k];
        let hi = points[front[order[m - 1]]].as_ref()[k];
        dist[order[0]] = f64::INFINITY;
        dist[order[m - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..m - 1 {
            let gap = points[front[order[w + 1]]].as_ref()[k] - points[front[order[w - 1]]].as_ref()[k];
            dist[order[w]] += gap / range;
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub fingerprint: String,
    pub objectives: ObjectiveVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
}

impl ArchiveEntry {
    pub fn point(&self) -> [f64; 4] {
        self.objectives.minimization()
    }
}

/// Mutually non-dominated set of evaluated individuals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub members: Vec<ArchiveEntry>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Inserts `entry` unless a member dominates it or already carries its
    /// fingerprint; evicts members it dominates. Returns whether it entered.
    pub fn update(&mut self, entry: ArchiveEntry) -> bool {
        let p = entry.point();
        if self
            .members
            .iter()
            .any(|m| m.fingerprint == entry.fingerprint || dominates_unchecked(&m.point(), &p))
        {
            return false;
        }
        self.members.retain(|m| !dominates_unchecked(&p, &m.point()));
        self.members.push(entry);
        true
    }

    pub fn is_mutually_non_dominated(&self) -> bool {
        let pts: Vec<[f64; 4]> = self.members.iter().map(ArchiveEntry::point).collect();
        pts.iter()
            .enumerate()
            .all(|(i, a)| pts.iter().enumerate().all(|(j, b)| i == j || !dominates_unchecked(a, b)))
    }

    pub fn fingerprints_sorted(&self) -> Vec<String> {
        let mut f: Vec<String> = self.members.iter().map(|m| m.fingerprint.clone()).collect();
        f.sort();
        f
    }
}

pub fn update_archive(mut archive: ParetoArchive, entry: ArchiveEntry) -> ParetoArchive {
    archive.update(entry);
    archive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum NormalizationPolicy {
    /// Bounds from every valid individual of the run(s), fitted post hoc.
    #[default]
    WholeRun,
    /// Bounds given up front, in minimization form.
    FixedBounds { min: [f64; 4], max: [f64; 4] },
}


/// Per-objective min-max map onto `[0, 1]`. Values outside the bounds are
/// clamped; an objective with `min == max` maps to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl Normalizer {
    pub fn fit_points(points: &[[f64; 4]]) -> Result<Self, MooError> {
        if points.is_empty() {
            return Err(MooError::EmptySet);
        }
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for p in points {
            for k in 0..4 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn transform_point(&self, p: &[f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for k in 0..4 {
            let range = self.max[k] - self.min[k];
            out[k] = if range > 0.0 {
                ((p[k] - self.min[k]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        out
    }

    pub fn transform(&self, v: &ObjectiveVector) -> [f64; 4] {
        self.transform_point(&v.minimization())
    }
}

pub fn fit_normalizer(individuals: &[ObjectiveVector], policy: &NormalizationPolicy) -> Result<Normalizer, MooError> {
    match policy {
        NormalizationPolicy::FixedBounds { min, max } => Ok(Normalizer { min: *min, max: *max }),
        NormalizationPolicy::WholeRun => {
            let pts: Vec<[f64; 4]> = individuals.iter().map(ObjectiveVector::minimization).collect();
            Normalizer::fit_points(&pts)
        }
    }
}

/// Dominated volume and its complement within the unit box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HvReport {
    /// Volume dominated by the front, bounded by the all-ones reference.
    pub dominated_hv: f64,
    /// `1 - dominated_hv`; smaller means the front reaches further.
    pub residual_hv: f64,
}

/// Exact volume of the union of boxes `[p, 1]` for points in `[0, 1]^d`,
/// `d <= 4`, by slicing along the last objective.
pub fn hypervolume<P: AsRef<[f64]>>(front: &[P]) -> Result<f64, MooError> {
    let Some(first) = front.first() else {
        return Ok(0.0);
    };
    let d = first.as_ref().len();
    if d > 4 {
        return Err(MooError::TooManyObjectives(d));
    }
    let mut pts = Vec::with_capacity(front.len());
    for (i, p) in front.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != d {
            return Err(MooError::DimensionMismatch(d, p.len()));
        }
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(MooError::PointOutOfBox { index: i });
        }
        pts.push(p.to_vec());
    }
    if d == 0 {
        return Ok(0.0);
    }
    Ok(slice_volume(pts, d))
}

pub fn hv_report<P: AsRef<[f64]>>(front: &[P]) -> Result<HvReport, MooError> {
    let dominated_hv = hypervolume(front)?;
    Ok(HvReport {
        dominated_hv,
        residual_hv: 1.0 - dominated_hv,
    })
}

fn prune(mut pts: Vec<Vec<f64>>, d: usize) -> Vec<Vec<f64>> {
    pts.sort_by(|a, b| a[..d].partial_cmp(&b[..d]).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup_by(|a, b| a[..d] == b[..d]);
    let keep: Vec<bool> = (0..pts.len())
        .map(|i| !pts.iter().any(|q| dominates_unchecked(&q[..d], &pts[i][..d])))
        .collect();
    pts.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
}

fn slice_volume(pts: Vec<Vec<f64>>, d: usize) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    match d {
        1 => 1.0 - pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
        2 => {
            let mut pts = pts;
            pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
            let mut best_y = 1.0f64;
            let mut vol = 0.0;
            for (i, p) in pts.iter().enumerate() {
                best_y = best_y.min(p[1]);
                let next_x = pts.get(i + 1).map_or(1.0, |q| q[0]);
                vol += (next_x - p[0]) * (1.0 - best_y);
            }
            vol
        }
        _ => {
            let mut pts = prune(pts, d);
            let last = d - 1;
            pts.sort_by(|a, b| a[last].total_cmp(&b[last]));
            let mut vol = 0.0;
            for i in 0..pts.len() {
                let z = pts[i][last];
                let next_z = pts.get(i + 1).map_or(1.0, |q| q[last]);
                let thickness = next_z - z;
                if thickness <= 0.0 {
                    continue;
                }
                let slice: Vec<Vec<f64>> = pts[..=i].iter().map(|p| p[..last].to_vec()).collect();
                vol += slice_volume(slice, last) * thickness;
            }
            vol
        }
    }
}
