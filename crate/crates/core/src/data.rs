//! Driving sequences, lane maps and the on-disk ingestion format.
//!
//! A dataset directory holds a `manifest.json` naming every sequence file
//! and map file:
//!
//! ```json
//! {
//!   "sequences": [{"id": "s0", "file": "sequences/s0.jsonl", "map_ref": "corridor"}],
//!   "maps": [{"id": "corridor", "file": "maps/corridor.json"}]
//! }
//! ```
//!
//! Each sequence file is line-delimited JSON, one frame per line:
//! `{"t":0.0,"ego":{"x":..,"y":..,"heading":..,"speed":..},"agents":[{"id":"a","polygon":[[x,y],..],"vx":..,"vy":..}],"light":"red"}`.
//! Map files carry `{"boundaries":[[[x,y],..],..],"junctions":[[[x,y],..],..]}`.
//! Angles are radians, lengths meters, speeds m/s, in a local east-north frame.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }
}

/// Ego pose plus scalar speed along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    #[serde(flatten)]
    pub pose: Pose2D,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AgentRecord", into = "AgentRecord")]
pub struct AgentState {
    pub id: String,
    /// World-frame vertices, counter-clockwise.
    pub polygon: Vec<[f64; 2]>,
    /// World-frame velocity in m/s.
    pub velocity: [f64; 2],
}

impl AgentState {
    /// Vertex average of the footprint.
    pub fn centroid(&self) -> [f64; 2] {
        let n = self.polygon.len().max(1) as f64;
        let (sx, sy) = self
            .polygon
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }
}

#[derive(Serialize, Deserialize)]
struct AgentRecord {
    id: String,
    polygon: Vec<[f64; 2]>,
    vx: f64,
    vy: f64,
}

impl From<AgentRecord> for AgentState {
    fn from(r: AgentRecord) -> Self {
        AgentState {
            id: r.id,
            polygon: r.polygon,
            velocity: [r.vx, r.vy],
        }
    }
}

impl From<AgentState> for AgentRecord {
    fn from(a: AgentState) -> Self {
        AgentRecord {
            id: a.id,
            polygon: a.polygon,
            vx: a.velocity[0],
            vy: a.velocity[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficLight {
    Red,
    Yellow,
    Green,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "t")]
    pub timestamp: f64,
    pub ego: EgoState,
    #[serde(default)]
    pub agents: Vec<AgentState>,
    #[serde(rename = "light", default, skip_serializing_if = "Option::is_none")]
    pub traffic_light: Option<TrafficLight>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneMap {
    pub boundaries: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub junctions: Vec<Vec<[f64; 2]>>,
}

impl LaneMap {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, line) in self.boundaries.iter().enumerate() {
            if line.len() < 2 {
                out.push(format!("boundary {i} has <2 points"));
            }
            if line.iter().flatten().any(|c| !c.is_finite()) {
                out.push(format!("boundary {i} has a non-finite coordinate"));
            }
        }
        for (i, poly) in self.junctions.iter().enumerate() {
            if poly.len() < 3 {
                out.push(format!("junction {i} has <3 vertices"));
            }
            if poly.iter().flatten().any(|c| !c.is_finite()) {
                out.push(format!("junction {i} has a non-finite coordinate"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub map_ref: String,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The sub-sequence made of the frames at `indices`, in the given order.
    pub fn select(&self, id: impl Into<String>, indices: &[usize]) -> Sequence {
        Sequence {
            id: id.into(),
            frames: indices.iter().map(|&k| self.frames[k].clone()).collect(),
            map_ref: self.map_ref.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub maps: BTreeMap<String, LaneMap>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn map_for(&self, seq: &Sequence) -> Result<&LaneMap> {
        self.maps.get(&seq.map_ref).ok_or_else(|| Error::Reference {
            sequence: seq.id.clone(),
            map_ref: seq.map_ref.clone(),
        })
    }

    /// Checks every dataset-level invariant and returns the first violation.
    pub fn validate(&self) -> Result<()> {
        for (name, map) in &self.maps {
            if let Some(v) = map.validate().into_iter().next() {
                return Err(Error::Validation {
                    sequence: format!("<map {name}>"),
                    message: v,
                });
            }
        }
        let mut ids = BTreeSet::new();
        for seq in &self.sequences {
            if !ids.insert(seq.id.as_str()) {
                return Err(Error::Validation {
                    sequence: seq.id.clone(),
                    message: "duplicate sequence id".into(),
                });
            }
            self.map_for(seq)?;
            let violations = validate_sequence(seq);
            if !violations.is_empty() {
                return Err(Error::Validation {
                    sequence: seq.id.clone(),
                    message: violations.join("; "),
                });
            }
        }
        Ok(())
    }

    /// The sequences at `indices`, in that order; maps are retained.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            maps: self.maps.clone(),
        }
    }
}

/// Lists every Sequence/Frame invariant violation, naming field and frame.
pub fn validate_sequence(seq: &Sequence) -> Vec<String> {
    let mut out = Vec::new();
    if seq.frames.len() < 2 {
        out.push(format!(
            "sequence has {} frames; at least 2 required",
            seq.frames.len()
        ));
    }
    for (k, frame) in seq.frames.iter().enumerate() {
        if !frame.timestamp.is_finite() {
            out.push(format!("frame {k}: non-finite timestamp"));
        } else if k > 0 && frame.timestamp <= seq.frames[k - 1].timestamp {
            out.push(format!("frame {k}: non-monotone timestamps"));
        }
        let pose = frame.ego.pose;
        if !(pose.x.is_finite() && pose.y.is_finite()) {
            out.push(format!("frame {k}: non-finite ego position"));
        }
        if !pose.heading.is_finite() || pose.heading <= -PI || pose.heading > PI {
            out.push(format!("frame {k}: ego heading outside (-pi, pi]"));
        }
        if !frame.ego.speed.is_finite() {
            out.push(format!("frame {k}: non-finite ego speed"));
        } else if frame.ego.speed < 0.0 {
            out.push(format!("frame {k}: negative ego speed"));
        }
        let mut ids = BTreeSet::new();
        for agent in &frame.agents {
            if !ids.insert(agent.id.as_str()) {
                out.push(format!("frame {k}: duplicate agent id {}", agent.id));
            }
            if agent.polygon.len() < 3 {
                out.push(format!(
                    "frame {k}: agent {} polygon has <3 vertices",
                    agent.id
                ));
            } else if agent.polygon.iter().flatten().any(|c| !c.is_finite()) {
                out.push(format!(
                    "frame {k}: agent {} polygon has a non-finite vertex",
                    agent.id
                ));
            } else if !polygon_is_simple(&agent.polygon) {
                out.push(format!(
                    "frame {k}: agent {} polygon is self-intersecting",
                    agent.id
                ));
            }
            if !agent.velocity.iter().all(|v| v.is_finite()) {
                out.push(format!("frame {k}: agent {} velocity not finite", agent.id));
            }
        }
    }
    out
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when no two non-adjacent edges of the closed polygon touch.
pub fn polygon_is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (b1, b2) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    sequences: Vec<ManifestSequence>,
    #[serde(default)]
    maps: Vec<ManifestMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestSequence {
    id: String,
    file: String,
    map_ref: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestMap {
    id: String,
    file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.json";

fn parse_sequence_file(path: &Path, id: &str, map_ref: &str) -> Result<Sequence> {
    let file = fs::File::open(path).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        frames.push(frame);
    }
    Ok(Sequence {
        id: id.to_string(),
        frames,
        map_ref: map_ref.to_string(),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads and validates a dataset directory.
///
/// An empty directory yields an empty dataset. Sequence files are parsed in
/// parallel and merged in manifest order.
pub fn parse_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        let has_entries = fs::read_dir(dir)?.next().is_some();
        if has_entries {
            return Err(Error::Parse {
                file: manifest_path,
                line: 0,
                message: "missing dataset manifest".into(),
            });
        }
        return Ok(Dataset::default());
    }
    let manifest: Manifest = read_json(&manifest_path)?;

    let mut maps = BTreeMap::new();
    for m in &manifest.maps {
        let map: LaneMap = read_json(&dir.join(&m.file))?;
        maps.insert(m.id.clone(), map);
    }
    for s in &manifest.sequences {
        if !maps.contains_key(&s.map_ref) {
            return Err(Error::Reference {
                sequence: s.id.clone(),
                map_ref: s.map_ref.clone(),
            });
        }
    }
    let sequences = manifest
        .sequences
        .par_iter()
        .map(|s| parse_sequence_file(&dir.join(&s.file), &s.id, &s.map_ref))
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset { sequences, maps };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes `dataset` in the ingestion format. Sequence files are named by
/// position so arbitrary ids stay filesystem-safe.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("sequences"))?;
    fs::create_dir_all(dir.join("maps"))?;

    let mut manifest = Manifest {
        sequences: Vec::with_capacity(dataset.len()),
        maps: Vec::with_capacity(dataset.maps.len()),
    };
    for (i, (name, map)) in dataset.maps.iter().enumerate() {
        let file = format!("maps/map_{i:04}.json");
        fs::write(dir.join(&file), serde_json::to_vec(map)?)?;
        manifest.maps.push(ManifestMap {
            id: name.clone(),
            file,
        });
    }
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let file = format!("sequences/seq_{i:05}.jsonl");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        for frame in &seq.frames {
            serde_json::to_writer(&mut w, frame)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        manifest.sequences.push(ManifestSequence {
            id: seq.id.clone(),
            file,
            map_ref: seq.map_ref.clone(),
        });
    }
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Reads the optional `labels.json` (sequence id → scenario name).
pub fn read_labels(dir: impl AsRef<Path>) -> Result<Option<BTreeMap<String, String>>> {
    let path: PathBuf = dir.as_ref().join(LABELS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

pub fn write_labels(labels: &BTreeMap<String, String>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(LABELS_FILE), serde_json::to_vec_pretty(labels)?)?;
    Ok(())
}
