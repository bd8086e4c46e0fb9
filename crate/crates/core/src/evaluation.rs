//! Label-free scoring of a clustering: augmentation into frame-disjoint
//! siblings, the true-positive rate over sibling groups, rule-based grading
//! vectors and the false-positive rate against each cluster's majority
//! grading.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LaneMap, Sequence, TrafficLight};
use crate::error::{Error, Result};
use crate::render::{decompose_velocity, to_ego_frame};

/// `[follow, follow in junction, collision risk, harsh jerk, slow follow,
/// yellow-light entry]`.
pub type GradingVector = [bool; 6];

/// Thresholds of the six grading rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    /// Longitudinal centroid gap window for following, m.
    pub follow_gap_min: f64,
    pub follow_gap_max: f64,
    /// Half-width of the ego corridor, m.
    pub follow_lateral_max: f64,
    /// Ego speed window for following, m/s.
    pub follow_speed_min: f64,
    pub follow_speed_max: f64,
    /// Minimum duration of a following episode, s.
    pub follow_min_duration: f64,
    /// Time-to-collision below which a frame is risky, s.
    pub ttc_threshold: f64,
    /// Jerk magnitude counted as harsh, m/s³.
    pub jerk_threshold: f64,
    /// Ego speed below which following counts as slow, m/s.
    pub slow_speed_max: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            follow_gap_min: 2.0,
            follow_gap_max: 50.0,
            follow_lateral_max: 1.75,
            follow_speed_min: 1.0,
            follow_speed_max: 20.0,
            follow_min_duration: 2.0,
            ttc_threshold: 3.0,
            jerk_threshold: 4.0,
            slow_speed_max: 2.0,
        }
    }
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Per-frame facts the rules are built from.
struct FrameFacts {
    t: f64,
    speed: f64,
    follow_geometry: bool,
    min_ttc: f64,
    in_junction: bool,
    yellow: Option<bool>,
}

fn frame_facts(seq: &Sequence, map: &LaneMap, rules: &RuleConfig) -> Vec<FrameFacts> {
    seq.frames
        .iter()
        .map(|f| {
            let ego = &f.ego.pose;
            let mut follow = false;
            let mut min_ttc = f64::INFINITY;
            for a in &f.agents {
                let [lon, lat] = to_ego_frame(ego, a.centroid());
                if lat.abs() >= rules.follow_lateral_max || lon <= 0.0 {
                    continue;
                }
                if lon >= rules.follow_gap_min && lon <= rules.follow_gap_max {
                    follow = true;
                }
                let [v_lon, _] = decompose_velocity(ego, a.velocity);
                let closing = f.ego.speed - v_lon;
                if closing > 0.0 {
                    min_ttc = min_ttc.min(lon / closing);
                }
            }
            FrameFacts {
                t: f.timestamp,
                speed: f.ego.speed,
                follow_geometry: follow,
                min_ttc,
                in_junction: map.junctions.iter().any(|j| point_in_polygon([ego.x, ego.y], j)),
                yellow: f.traffic_light.map(|l| l == TrafficLight::Yellow),
            }
        })
        .collect()
}

/// Maximal runs of consecutive frames satisfying `pred`, as index ranges.
fn runs(facts: &[FrameFacts], pred: impl Fn(&FrameFacts) -> bool) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, f) in facts.iter().enumerate() {
        match (pred(f), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..facts.len());
    }
    out
}

/// Largest |d²v/dt²| from finite differences on the actual timestamps.
pub fn max_jerk(times: &[f64], speeds: &[f64]) -> f64 {
    if times.len() < 3 {
        return 0.0;
    }
    let acc: Vec<(f64, f64)> = times
        .windows(2)
        .zip(speeds.windows(2))
        .map(|(t, v)| ((t[0] + t[1]) / 2.0, (v[1] - v[0]) / (t[1] - t[0])))
        .collect();
    acc.windows(2)
        .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
        .fold(0.0, f64::max)
}

/// Evaluates the six boolean rules on one sequence.
pub fn compute_grading(seq: &Sequence, map: &LaneMap, rules: &RuleConfig) -> GradingVector {
    let facts = frame_facts(seq, map, rules);
    let follow_runs: Vec<_> = runs(&facts, |f| {
        f.follow_geometry && f.speed >= rules.follow_speed_min && f.speed <= rules.follow_speed_max
    })
    .into_iter()
    .filter(|r| facts[r.end - 1].t - facts[r.start].t >= rules.follow_min_duration)
    .collect();
    let v1 = !follow_runs.is_empty();
    let v2 = follow_runs.iter().any(|r| facts[r.clone()].iter().any(|f| f.in_junction));
    let v3 = facts.iter().any(|f| f.min_ttc < rules.ttc_threshold);
    let times: Vec<f64> = facts.iter().map(|f| f.t).collect();
    let speeds: Vec<f64> = facts.iter().map(|f| f.speed).collect();
    let v4 = max_jerk(&times, &speeds) > rules.jerk_threshold;
    let v5 = facts.iter().any(|f| f.follow_geometry && f.speed < rules.slow_speed_max);
    let v6 = facts.windows(2).any(|w| {
        !w[0].in_junction && w[1].in_junction && (w[0].yellow == Some(true) || w[1].yellow == Some(true))
    });
    [v1, v2, v3, v4, v5, v6]
}

/// One original sequence and its frame-disjoint derived siblings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingGroup {
    pub origin: String,
    pub derived_ids: Vec<String>,
    /// Sorted frame indices of each derived sequence.
    pub subsets: Vec<Vec<usize>>,
}

pub fn derived_id(origin: &str, d: usize) -> String {
    format!("{origin}#d{d}")
}

/// Uniformly random partition of `0..len` into `n` ordered subsets whose
/// sizes differ by at most one: the indices are shuffled and dealt out.
pub fn partition_indices(len: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("number of derived sequences must be positive"));
    }
    if len < n {
        return Err(Error::invalid(format!(
            "sequence too short: {len} frames cannot form {n} disjoint non-empty subsets"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut subsets = vec![Vec::new(); n];
    for (slot, &idx) in order.iter().enumerate() {
        subsets[slot % n].push(idx);
    }
    for s in &mut subsets {
        s.sort_unstable();
    }
    Ok(subsets)
}

/// Splits one sequence into siblings.
pub fn augment_sequence(seq: &Sequence, n_derived: usize, seed: u64) -> Result<SiblingGroup> {
    augment_index(&seq.id, seq.len(), n_derived, seed)
}

/// Siblings of a sequence known only by id and length.
pub fn augment_index(id: &str, len: usize, n_derived: usize, seed: u64) -> Result<SiblingGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets = partition_indices(len, n_derived, &mut rng).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Validation {
            sequence: id.to_string(),
            message: m,
        },
        other => other,
    })?;
    Ok(SiblingGroup {
        origin: id.to_string(),
        derived_ids: (0..n_derived).map(|d| derived_id(id, d)).collect(),
        subsets,
    })
}

/// Siblings for every sequence; sequence `i` draws from seed `(seed, i)`.
pub fn augment_dataset(dataset: &Dataset, n_derived: usize, seed: u64) -> Result<Vec<SiblingGroup>> {
    let index: Vec<(&str, usize)> = dataset.sequences.iter().map(|s| (s.id.as_str(), s.len())).collect();
    augment_all(&index, n_derived, seed)
}

/// [`augment_dataset`] from `(id, length)` pairs.
pub fn augment_all(index: &[(&str, usize)], n_derived: usize, seed: u64) -> Result<Vec<SiblingGroup>> {
    index
        .par_iter()
        .enumerate()
        .map(|(i, (id, len))| augment_index(id, *len, n_derived, seed ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)))
        .collect()
}

/// The derived sequences of a group, in sibling order.
pub fn derived_sequences(seq: &Sequence, group: &SiblingGroup) -> Vec<Sequence> {
    group
        .derived_ids
        .iter()
        .zip(&group.subsets)
        .map(|(id, idx)| seq.select(id.clone(), idx))
        .collect()
}

/// Share of derived sequences whose whole sibling group shares one label.
pub fn true_positive_rate(groups: &[SiblingGroup], labels: &BTreeMap<String, usize>) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for g in groups {
        let ls = g
            .derived_ids
            .iter()
            .map(|id| labels.get(id).copied().ok_or_else(|| Error::invalid(format!("derived sequence {id} has no cluster label"))))
            .collect::<Result<Vec<_>>>()?;
        total += ls.len();
        if ls.windows(2).all(|w| w[0] == w[1]) {
            correct += ls.len();
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Modal grading per cluster; ties go to the lexicographically smallest.
pub fn majority_gradings(
    labels: &BTreeMap<String, usize>,
    gradings: &BTreeMap<String, GradingVector>,
) -> Result<BTreeMap<usize, GradingVector>> {
    let mut counts: BTreeMap<usize, BTreeMap<GradingVector, usize>> = BTreeMap::new();
    for (id, &c) in labels {
        let g = gradings
            .get(id)
            .ok_or_else(|| Error::invalid(format!("sequence {id} has no grading vector")))?;
        *counts.entry(c).or_default().entry(*g).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(c, m)| {
            // BTreeMap iterates in ascending key order, so the first maximum
            // is the lexicographically smallest.
            let best = m.iter().fold((None, 0usize), |acc, (g, &n)| if n > acc.1 { (Some(*g), n) } else { acc });
            (c, best.0.expect("non-empty cluster"))
        })
        .collect())
}

/// Share of sequences whose grading differs from their cluster's majority.
pub fn false_positive_rate(labels: &BTreeMap<String, usize>, gradings: &BTreeMap<String, GradingVector>) -> Result<f64> {
    let majority = majority_gradings(labels, gradings)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let wrong = labels
        .iter()
        .filter(|(id, c)| gradings[id.as_str()] != majority[c])
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Share of sequences whose template is their cluster's most common one.
pub fn cluster_purity(labels: &BTreeMap<String, usize>, truth: &BTreeMap<String, String>) -> Result<f64> {
    let mut counts: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
    for (id, &c) in labels {
        let t = truth
            .get(id)
            .ok_or_else(|| Error::invalid(format!("sequence {id} has no ground-truth label")))?;
        *counts.entry(c).or_default().entry(t.as_str()).or_default() += 1;
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / labels.len() as f64)
}

/// One row of the per-cluster table in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub majority_grading: GradingVector,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub majority_template: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
}

/// Scores of one clustering of a derived set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub tp: f64,
    pub fp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    pub per_cluster: Vec<ClusterSummary>,
}

/// TP, FP, purity and the per-cluster table in one pass.
/// `truth` maps derived ids to template names when known.
pub fn score_clustering(
    groups: &[SiblingGroup],
    labels: &BTreeMap<String, usize>,
    gradings: &BTreeMap<String, GradingVector>,
    truth: Option<&BTreeMap<String, String>>,
) -> Result<ClusterScores> {
    let tp = true_positive_rate(groups, labels)?;
    let fp = false_positive_rate(labels, gradings)?;
    let purity = truth.map(|t| cluster_purity(labels, t)).transpose()?;
    let majority = majority_gradings(labels, gradings)?;
    let mut members: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, &c) in labels {
        members.entry(c).or_default().push(id);
    }
    let per_cluster = members
        .iter()
        .map(|(&c, ids)| {
            let (majority_template, purity) = match truth {
                Some(t) => {
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    for id in ids {
                        if let Some(name) = t.get(*id) {
                            *counts.entry(name).or_default() += 1;
                        }
                    }
                    let best = counts
                        .iter()
                        .fold((None, 0usize), |acc, (n, &k)| if k > acc.1 { (Some(n.to_string()), k) } else { acc });
                    (best.0, Some(best.1 as f64 / ids.len() as f64))
                }
                None => (None, None),
            };
            ClusterSummary {
                cluster: c,
                size: ids.len(),
                majority_grading: majority[&c],
                majority_template,
                purity,
            }
        })
        .collect();
    Ok(ClusterScores {
        tp,
        fp,
        purity,
        per_cluster,
    })
}
