//! Deterministic synthetic driving scenarios with ground-truth labels.
//!
//! Six scripted templates run at a fixed 10 Hz with lengths drawn from
//! `[50, 150]` frames. Every trajectory is produced by forward-Euler
//! integration, so `position[k+1] = position[k] + dt * velocity[k]` holds for
//! the ego and every agent centroid. Event timings scale with the sequence
//! duration so that short and long instances of a template show the same
//! maneuver.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{wrap_angle, AgentState, Dataset, EgoState, Frame, LaneMap, Pose2D, Sequence};
use crate::error::{Error, Result};

pub const FRAME_RATE_HZ: f64 = 10.0;
pub const DT: f64 = 1.0 / FRAME_RATE_HZ;
pub const MIN_FRAMES: usize = 50;
pub const MAX_FRAMES: usize = 150;
pub const VEHICLE_LENGTH: f64 = 4.8;
pub const VEHICLE_WIDTH: f64 = 1.8;
pub const LANE_WIDTH: f64 = 3.5;
pub const MAX_SPEED: f64 = 30.0;

/// Half-size of the square junction area around the intersection center.
pub const JUNCTION_AREA_HALF: f64 = 30.0;
/// Distance from the intersection center to where lane boundaries stop.
const JUNCTION_BOX_HALF: f64 = 10.0;
const CORRIDOR_MAP: &str = "corridor";
const JUNCTION_MAP: &str = "junction";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    StraightFollow,
    StopAtJunction,
    LeftTurn,
    RightTurn,
    Overtake,
    CutIn,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::StraightFollow,
        TemplateKind::StopAtJunction,
        TemplateKind::LeftTurn,
        TemplateKind::RightTurn,
        TemplateKind::Overtake,
        TemplateKind::CutIn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::StraightFollow => "straight_follow",
            TemplateKind::StopAtJunction => "stop_at_junction",
            TemplateKind::LeftTurn => "left_turn",
            TemplateKind::RightTurn => "right_turn",
            TemplateKind::Overtake => "overtake",
            TemplateKind::CutIn => "cut_in",
        }
    }

    /// Default parameter ranges. Speeds in m/s, gaps in m, times in s.
    pub fn default_ranges(self) -> BTreeMap<String, [f64; 2]> {
        let pairs: &[(&str, [f64; 2])] = match self {
            TemplateKind::StraightFollow => &[
                ("ego_speed", [9.0, 13.0]),
                ("gap", [22.0, 30.0]),
                ("lead_speed_amplitude", [0.5, 1.5]),
                ("lead_period", [4.0, 8.0]),
                ("ego_speed_amplitude", [0.3, 0.8]),
                ("ego_period", [5.0, 10.0]),
            ],
            TemplateKind::StopAtJunction => &[
                ("ego_speed", [5.0, 7.0]),
                ("gap", [10.0, 11.5]),
                ("stop_gap", [7.0, 8.0]),
            ],
            TemplateKind::LeftTurn => &[("ego_speed", [6.5, 8.5]), ("oncoming_speed", [9.0, 12.0])],
            TemplateKind::RightTurn => &[("ego_speed", [4.0, 5.5])],
            TemplateKind::Overtake => &[
                ("ego_speed", [15.0, 18.0]),
                ("gap", [20.0, 28.0]),
                ("speed_delta", [3.5, 5.0]),
                ("lane_change_time", [2.0, 2.5]),
            ],
            TemplateKind::CutIn => &[
                ("ego_speed", [11.0, 14.0]),
                ("gap", [16.0, 17.0]),
                ("speed_delta", [5.5, 6.5]),
                ("reaction_time", [0.9, 1.2]),
            ],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

/// A scenario type plus overrides for its parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTemplate {
    pub name: TemplateKind,
    #[serde(default)]
    pub param_ranges: BTreeMap<String, [f64; 2]>,
}

impl ScenarioTemplate {
    pub fn new(name: TemplateKind) -> Self {
        Self {
            name,
            param_ranges: BTreeMap::new(),
        }
    }

    /// Every template with default ranges.
    pub fn all() -> Vec<ScenarioTemplate> {
        TemplateKind::ALL.iter().map(|&k| Self::new(k)).collect()
    }

    /// Default ranges overlaid with the configured overrides, validated.
    pub fn resolved_ranges(&self) -> Result<BTreeMap<String, [f64; 2]>> {
        let mut ranges = self.name.default_ranges();
        for (key, range) in &self.param_ranges {
            if !ranges.contains_key(key) {
                return Err(Error::config(format!(
                    "template {}: unknown parameter {key:?}",
                    self.name.name()
                )));
            }
            ranges.insert(key.clone(), *range);
        }
        for (key, [lo, hi]) in &ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::config(format!(
                    "template {}: range {key} = [{lo}, {hi}] is empty",
                    self.name.name()
                )));
            }
            if key.contains("speed") && !key.contains("amplitude") && (*lo < 0.0 || *hi > MAX_SPEED) {
                return Err(Error::config(format!(
                    "template {}: {key} must lie within [0, {MAX_SPEED}] m/s",
                    self.name.name()
                )));
            }
            if !key.contains("speed") && *lo <= 0.0 {
                return Err(Error::config(format!(
                    "template {}: {key} must be positive",
                    self.name.name()
                )));
            }
        }
        Ok(ranges)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    /// Sequence id → template name.
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy)]
struct Body {
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
}

impl Body {
    fn velocity(&self) -> [f64; 2] {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }

    /// Advances one frame: position from the current velocity, then the new
    /// heading and speed.
    fn step(&mut self, yaw_rate: f64, next_speed: f64) {
        let v = self.velocity();
        self.x += DT * v[0];
        self.y += DT * v[1];
        self.heading = wrap_angle(self.heading + DT * yaw_rate);
        self.speed = next_speed.max(0.0);
    }

    fn footprint(&self) -> Vec<[f64; 2]> {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (VEHICLE_LENGTH / 2.0, VEHICLE_WIDTH / 2.0);
        [[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]]
            .iter()
            .map(|&[a, b]| [self.x + c * a - s * b, self.y + s * a + c * b])
            .collect()
    }

    fn agent(&self, id: &str) -> AgentState {
        AgentState {
            id: id.to_string(),
            polygon: self.footprint(),
            velocity: self.velocity(),
        }
    }

    fn ego(&self) -> EgoState {
        EgoState {
            pose: Pose2D::new(self.x, self.y, self.heading),
            speed: self.speed,
        }
    }
}

/// Per-frame control: yaw rate and speed for the next frame.
type Control = Box<dyn Fn(f64) -> (f64, f64)>;

struct Actor {
    id: &'static str,
    body: Body,
    control: Control,
}

fn corridor_map() -> LaneMap {
    let ys = [-LANE_WIDTH / 2.0, LANE_WIDTH / 2.0, 1.5 * LANE_WIDTH];
    LaneMap {
        boundaries: ys.iter().map(|&y| vec![[-300.0, y], [4000.0, y]]).collect(),
        junctions: vec![],
    }
}

fn junction_map() -> LaneMap {
    let mut boundaries = Vec::new();
    let (near, far) = (JUNCTION_BOX_HALF, 400.0);
    for offset in [-LANE_WIDTH, 0.0, LANE_WIDTH] {
        boundaries.push(vec![[-far, offset], [-near, offset]]);
        boundaries.push(vec![[near, offset], [far, offset]]);
        boundaries.push(vec![[offset, -far], [offset, -near]]);
        boundaries.push(vec![[offset, near], [offset, far]]);
    }
    let h = JUNCTION_AREA_HALF;
    LaneMap {
        boundaries,
        junctions: vec![vec![[-h, -h], [h, -h], [h, h], [-h, h]]],
    }
}

fn map_name(kind: TemplateKind) -> &'static str {
    match kind {
        TemplateKind::StraightFollow | TemplateKind::Overtake | TemplateKind::CutIn => CORRIDOR_MAP,
        TemplateKind::StopAtJunction | TemplateKind::LeftTurn | TemplateKind::RightTurn => {
            JUNCTION_MAP
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, ranges: &BTreeMap<String, [f64; 2]>, key: &str) -> f64 {
    let [lo, hi] = ranges[key];
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Heading pulse that shifts a vehicle laterally by `offset` meters over
/// `duration` seconds at roughly `speed`. Returns the yaw rate at time `tau`.
fn lane_change_yaw(offset: f64, duration: f64, speed: f64, tau: f64) -> f64 {
    if !(0.0..duration).contains(&tau) {
        return 0.0;
    }
    let peak = (offset * PI / (2.0 * speed.max(0.5) * duration)).clamp(-0.6, 0.6);
    peak * PI / duration * (PI * tau / duration).cos()
}

/// Small smooth speed variation `a·sin(2πt/period + phase)`, as seen in
/// human driving.
fn wobble(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 + Copy {
    let amp = rng.gen_range(0.2..0.5);
    let period = rng.gen_range(4.0..8.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    move |t: f64| amp * (2.0 * PI * t / period + phase).sin()
}

/// Same as [`wobble`] but zero (and rising) at `t = start`, zero before it.
fn wobble_from(rng: &mut ChaCha8Rng, start: f64) -> impl Fn(f64) -> f64 + Copy {
    let amp = rng.gen_range(0.2..0.5);
    let period = rng.gen_range(4.0..8.0);
    move |t: f64| {
        if t <= start {
            0.0
        } else {
            amp * (2.0 * PI * (t - start) / period).sin()
        }
    }
}

/// Vehicles crossing the junction on the north-south road. Each one passes
/// the ego's lane only after `clear_after` seconds.
fn cross_traffic(rng: &mut ChaCha8Rng, clear_after: f64, duration: f64) -> Vec<Actor> {
    const IDS: [&str; 8] = ["cross0", "cross1", "cross2", "cross3", "cross4", "cross5", "cross6", "cross7"];
    let mut actors = Vec::new();
    let mut t_cross = clear_after + rng.gen_range(0.5..1.5);
    while t_cross < duration && actors.len() < IDS.len() {
        let speed = rng.gen_range(8.0..11.0);
        let northbound = rng.gen::<bool>();
        // The ego's lane spans y in [-3.5, 0]; the vehicle's front reaches
        // its near edge at `t_cross`.
        let (x, heading, y0) = if northbound {
            (LANE_WIDTH / 2.0, FRAC_PI_2, -LANE_WIDTH - VEHICLE_LENGTH / 2.0 - speed * t_cross)
        } else {
            (-LANE_WIDTH / 2.0, -FRAC_PI_2, VEHICLE_LENGTH / 2.0 + speed * t_cross)
        };
        actors.push(Actor {
            id: IDS[actors.len()],
            body: Body { x, y: y0, heading, speed },
            control: Box::new(move |_| (0.0, speed)),
        });
        t_cross += rng.gen_range(2.5..4.0);
    }
    actors
}

/// Westbound vehicles in the opposing lane. None is near the junction
/// while the ego turns across that lane in `[turn_from, turn_to]`.
fn oncoming_traffic(rng: &mut ChaCha8Rng, speed: f64, turn_from: f64, turn_to: f64, duration: f64) -> Vec<Actor> {
    const IDS: [&str; 8] = ["oncoming0", "oncoming1", "oncoming2", "oncoming3", "oncoming4", "oncoming5", "oncoming6", "oncoming7"];
    // Time a vehicle needs to clear 35 m either side of the conflict point.
    let margin = 35.0 / speed;
    // The last vehicle before the turn passes shortly before the window;
    // the rest follow at random headways before and after it.
    let mut times = Vec::new();
    let mut t = turn_from - margin - rng.gen_range(0.3..1.5);
    while t > -5.0 {
        times.push(t);
        t -= rng.gen_range(2.0..3.5);
    }
    t = turn_to + margin + rng.gen_range(0.3..1.5);
    while t < duration + margin {
        times.push(t);
        t += rng.gen_range(2.0..3.5);
    }
    times.sort_by(f64::total_cmp);
    let mut actors = Vec::new();
    for t_pass in times.into_iter().take(IDS.len()) {
        let x0 = speed * t_pass;
        actors.push(Actor {
            id: IDS[actors.len()],
            body: Body { x: x0, y: LANE_WIDTH / 2.0, heading: PI, speed },
            control: Box::new(move |_| (0.0, speed)),
        });
    }
    actors
}

fn script(kind: TemplateKind, frames: usize, rng: &mut ChaCha8Rng, ranges: &BTreeMap<String, [f64; 2]>) -> (Body, Control, Vec<Actor>) {
    let duration = (frames - 1) as f64 * DT;
    let ego_speed = draw(rng, ranges, "ego_speed");
    let lane_y = -LANE_WIDTH / 2.0;
    match kind {
        TemplateKind::StraightFollow => {
            let gap = draw(rng, ranges, "gap");
            let lead_amp = draw(rng, ranges, "lead_speed_amplitude");
            let lead_period = draw(rng, ranges, "lead_period");
            let ego_amp = draw(rng, ranges, "ego_speed_amplitude");
            let ego_period = draw(rng, ranges, "ego_period");
            let (lead_phase, ego_phase) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            let ego_v = move |t: f64| ego_speed + ego_amp * (2.0 * PI * t / ego_period + ego_phase).sin();
            let lead_v = move |t: f64| {
                ego_v(t) + lead_amp * (2.0 * PI * t / lead_period + lead_phase).sin()
            };
            let ego = Body { x: 0.0, y: 0.0, heading: 0.0, speed: ego_v(0.0) };
            let lead = Body { x: gap, y: 0.0, heading: 0.0, speed: lead_v(0.0) };
            (
                ego,
                Box::new(move |t| (0.0, ego_v(t + DT))),
                vec![Actor { id: "lead", body: lead, control: Box::new(move |t| (0.0, lead_v(t + DT))) }],
            )
        }
        TemplateKind::StopAtJunction => {
            let gap = draw(rng, ranges, "gap");
            let stop_gap = draw(rng, ranges, "stop_gap");
            let brake_time = (0.7 * duration).max(4.5);
            let lead_v = move |t: f64| {
                if t >= brake_time {
                    0.0
                } else {
                    ego_speed * (1.0 + (PI * t / brake_time).cos()) / 2.0
                }
            };
            // sin² closing profile: the gap shrinks by gap - stop_gap and the
            // ego's acceleration is zero when it comes to rest.
            let closing = 2.0 * (gap - stop_gap) / brake_time;
            let ego_v = move |t: f64| {
                if t >= brake_time {
                    0.0
                } else {
                    lead_v(t) + closing * (PI * t / brake_time).sin().powi(2)
                }
            };
            let lead_stop_x = -JUNCTION_BOX_HALF - VEHICLE_LENGTH / 2.0;
            let lead_x0 = lead_stop_x - ego_speed * brake_time / 2.0;
            let lead = Body { x: lead_x0, y: lane_y, heading: 0.0, speed: lead_v(0.0) };
            let ego = Body { x: lead_x0 - gap, y: lane_y, heading: 0.0, speed: ego_v(0.0) };
            let mut actors = vec![Actor { id: "lead", body: lead, control: Box::new(move |t| (0.0, lead_v(t + DT))) }];
            actors.extend(cross_traffic(rng, brake_time, duration));
            (ego, Box::new(move |t| (0.0, ego_v(t + DT))), actors)
        }
        TemplateKind::LeftTurn | TemplateKind::RightTurn => {
            let (radius, sign) = if kind == TemplateKind::LeftTurn {
                (JUNCTION_BOX_HALF + LANE_WIDTH / 2.0, 1.0)
            } else {
                (JUNCTION_BOX_HALF - LANE_WIDTH / 2.0, -1.0)
            };
            let turn_time = FRAC_PI_2 * radius / ego_speed;
            let turn_start = (0.55 * duration).min(duration - turn_time - 0.5);
            let x0 = -JUNCTION_BOX_HALF - ego_speed * turn_start;
            let w = wobble(rng);
            let ego = Body { x: x0, y: lane_y, heading: 0.0, speed: ego_speed + w(0.0) };
            let yaw = sign * ego_speed / radius;
            let actors = if kind == TemplateKind::LeftTurn {
                let speed = draw(rng, ranges, "oncoming_speed");
                oncoming_traffic(rng, speed, turn_start, turn_start + turn_time, duration)
            } else {
                vec![]
            };
            (
                ego,
                Box::new(move |t| {
                    let turning = t >= turn_start && t < turn_start + turn_time;
                    (if turning { yaw } else { 0.0 }, ego_speed + w(t + DT))
                }),
                actors,
            )
        }
        TemplateKind::Overtake => {
            let gap = draw(rng, ranges, "gap");
            let delta = draw(rng, ranges, "speed_delta");
            let lc_time = draw(rng, ranges, "lane_change_time");
            let (w_ego, w_slow) = (wobble(rng), wobble(rng));
            let slow_speed = ego_speed - delta;
            let slow = Body { x: gap, y: 0.0, heading: 0.0, speed: slow_speed + w_slow(0.0) };
            let ego = Body { x: 0.0, y: 0.0, heading: 0.0, speed: ego_speed + w_ego(0.0) };
            // Pull out at once and stay in the passing lane.
            (
                ego,
                Box::new(move |t| {
                    let out = lane_change_yaw(LANE_WIDTH, lc_time, ego_speed, t);
                    (out, ego_speed + w_ego(t + DT))
                }),
                vec![Actor {
                    id: "slow",
                    body: slow,
                    control: Box::new(move |t| (0.0, slow_speed + w_slow(t + DT))),
                }],
            )
        }
        TemplateKind::CutIn => {
            let gap = draw(rng, ranges, "gap");
            let delta = draw(rng, ranges, "speed_delta");
            let reaction = draw(rng, ranges, "reaction_time");
            let lc_time = 1.5;
            let cut_start = 0.1 * duration;
            let brake_decel = 7.0;
            let brake_start = cut_start + lc_time / 2.0 + reaction;
            let final_speed = ego_speed - delta;
            let (w_cut, w_ego) = (wobble_from(rng, cut_start + lc_time), wobble(rng));
            let cutter_v = move |t: f64| {
                let tau = ((t - cut_start) / lc_time).clamp(0.0, 1.0);
                ego_speed - delta * tau + w_cut(t)
            };
            let ego_v = move |t: f64| {
                if t < brake_start {
                    ego_speed + w_ego(t)
                } else {
                    (ego_speed - brake_decel * (t - brake_start)).max(final_speed) + w_ego(t)
                }
            };
            let cutter = Body { x: gap, y: LANE_WIDTH, heading: 0.0, speed: ego_speed };
            let ego = Body { x: 0.0, y: 0.0, heading: 0.0, speed: ego_speed + w_ego(0.0) };
            let mean_speed = ego_speed - delta / 2.0;
            (
                ego,
                Box::new(move |t| (0.0, ego_v(t + DT))),
                vec![Actor {
                    id: "cutter",
                    body: cutter,
                    control: Box::new(move |t| {
                        (lane_change_yaw(-LANE_WIDTH, lc_time, mean_speed, t - cut_start), cutter_v(t + DT))
                    }),
                }],
            )
        }
    }
}

fn generate_sequence(id: String, kind: TemplateKind, rng: &mut ChaCha8Rng, ranges: &BTreeMap<String, [f64; 2]>) -> Sequence {
    let frames = rng.gen_range(MIN_FRAMES..=MAX_FRAMES);
    let (mut ego, ego_control, mut actors) = script(kind, frames, rng, ranges);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let t = k as f64 * DT;
        out.push(Frame {
            timestamp: t,
            ego: ego.ego(),
            agents: actors.iter().map(|a| a.body.agent(a.id)).collect(),
            traffic_light: None,
        });
        let (yaw, speed) = ego_control(t);
        ego.step(yaw, speed);
        for actor in &mut actors {
            let (yaw, speed) = (actor.control)(t);
            actor.body.step(yaw, speed);
        }
    }
    Sequence {
        id,
        frames: out,
        map_ref: map_name(kind).to_string(),
    }
}

fn sub_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates `count_per_template` labeled sequences per template.
///
/// Output is a pure function of the arguments; each template draws from its
/// own stream seeded by `(seed, template index)`.
pub fn generate_dataset(templates: &[ScenarioTemplate], count_per_template: usize, seed: u64) -> Result<LabeledDataset> {
    if templates.is_empty() {
        return Err(Error::config("at least one scenario template is required"));
    }
    if count_per_template == 0 {
        return Err(Error::config("count per template must be at least 1"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in templates {
        if !seen.insert(t.name) {
            return Err(Error::config(format!("template {} listed twice", t.name.name())));
        }
    }
    let resolved = templates
        .iter()
        .map(|t| t.resolved_ranges())
        .collect::<Result<Vec<_>>>()?;

    let per_template: Vec<Vec<Sequence>> = templates
        .par_iter()
        .zip(resolved.par_iter())
        .enumerate()
        .map(|(idx, (template, ranges))| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, idx));
            (0..count_per_template)
                .map(|j| {
                    let id = format!("{}_{j:03}", template.name.name());
                    generate_sequence(id, template.name, &mut rng, ranges)
                })
                .collect()
        })
        .collect();

    let mut dataset = Dataset::default();
    let mut labels = BTreeMap::new();
    for (template, seqs) in templates.iter().zip(per_template) {
        let name = map_name(template.name);
        dataset.maps.entry(name.to_string()).or_insert_with(|| match name {
            CORRIDOR_MAP => corridor_map(),
            _ => junction_map(),
        });
        for seq in seqs {
            labels.insert(seq.id.clone(), template.name.name().to_string());
            dataset.sequences.push(seq);
        }
    }
    Ok(LabeledDataset { dataset, labels })
}
