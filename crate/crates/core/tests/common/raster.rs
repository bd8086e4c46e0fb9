//! Rasterizer properties on randomized frames.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drivecluster::data::{AgentState, EgoState, Frame, LaneMap, Pose2D};
use drivecluster::render::{polygon_pixels, rasterize_frame, to_ego_frame, FrameImage, RasterConfig, NUM_LAYERS};

pub const FRAMES: usize = 1000;

pub struct Scene {
    pub frame: Frame,
    pub map: LaneMap,
    pub cfg: RasterConfig,
}

fn rect(cx: f64, cy: f64, heading: f64, length: f64, width: f64) -> Vec<[f64; 2]> {
    let (s, c) = heading.sin_cos();
    [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]
        .iter()
        .map(|[u, v]| {
            let (dx, dy) = (u * length, v * width);
            [cx + c * dx - s * dy, cy + s * dx + c * dy]
        })
        .collect()
}

/// A frame near a random world pose with agents and boundaries scattered
/// inside and outside the view.
pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let pixels = 2 * rng.gen_range(4..65) + 1;
    let cfg = RasterConfig {
        pixels,
        extent: rng.gen_range(30.0..150.0),
        v_max: rng.gen_range(5.0..30.0),
        ..RasterConfig::default()
    };
    let ego = Pose2D::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), rng.gen_range(-PI..PI));
    let reach = cfg.extent * 0.7;
    let near = |rng: &mut ChaCha8Rng| [ego.x + rng.gen_range(-reach..reach), ego.y + rng.gen_range(-reach..reach)];
    let agents = (0..rng.gen_range(0..7))
        .map(|i| {
            let [x, y] = near(rng);
            AgentState {
                id: format!("a{i}"),
                polygon: rect(x, y, rng.gen_range(-PI..PI), rng.gen_range(2.0..12.0), rng.gen_range(1.0..3.0)),
                velocity: [rng.gen_range(-35.0..35.0), rng.gen_range(-35.0..35.0)],
            }
        })
        .collect();
    let boundaries = (0..rng.gen_range(0..6))
        .map(|_| (0..rng.gen_range(2..6)).map(|_| near(rng)).collect())
        .collect();
    Scene {
        frame: Frame {
            timestamp: 0.0,
            ego: EgoState {
                pose: ego,
                speed: rng.gen_range(0.1..35.0),
            },
            agents,
            traffic_light: None,
        },
        map: LaneMap {
            boundaries,
            junctions: vec![],
        },
        cfg,
    }
}

fn rigid(p: [f64; 2], theta: f64, t: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1]]
}

fn transformed(scene: &Scene, theta: f64, t: [f64; 2]) -> (Frame, LaneMap) {
    let mut frame = scene.frame.clone();
    let ego = &mut frame.ego.pose;
    let [x, y] = rigid([ego.x, ego.y], theta, t);
    *ego = Pose2D::new(x, y, ego.heading + theta);
    for a in &mut frame.agents {
        a.polygon = a.polygon.iter().map(|&p| rigid(p, theta, t)).collect();
        a.velocity = rigid(a.velocity, theta, [0.0, 0.0]);
    }
    let map = LaneMap {
        boundaries: scene
            .map
            .boundaries
            .iter()
            .map(|l| l.iter().map(|&p| rigid(p, theta, t)).collect())
            .collect(),
        junctions: vec![],
    };
    (frame, map)
}

/// Moving every world coordinate by one rigid transform leaves the image
/// bit-identical.
pub fn rigid_invariance(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..FRAMES {
        let scene = random_scene(&mut rng);
        let theta = rng.gen_range(-PI..PI);
        let t = [rng.gen_range(-1000.0..1000.0), rng.gen_range(-1000.0..1000.0)];
        let (frame, map) = transformed(&scene, theta, t);
        let a = rasterize_frame(&scene.frame, &scene.map, &scene.cfg);
        let b = rasterize_frame(&frame, &map, &scene.cfg);
        if a.as_slice().iter().map(|v| v.to_bits()).ne(b.as_slice().iter().map(|v| v.to_bits())) {
            return Err(format!("frame {case}: image changed under a rigid transform"));
        }
    }
    Ok(FRAMES)
}

fn pixel_set(img: &FrameImage, layer: usize) -> BTreeSet<(usize, usize)> {
    let p = img.pixels();
    (0..p * p)
        .filter(|&i| img.layer(layer)[i] != 0.0)
        .map(|i| (i / p, i % p))
        .collect()
}

/// Even-odd ray test of `q` against a polygon, both in ego coordinates.
fn inside(poly: &[[f64; 2]], q: [f64; 2]) -> bool {
    let mut hit = false;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        if (a[0] > q[0]) != (b[0] > q[0]) {
            let lat = a[1] + (q[0] - a[0]) * (b[1] - a[1]) / (b[0] - a[0]);
            if q[1] < lat {
                hit = !hit;
            }
        }
    }
    hit
}

/// Every pixel center tested against the polygon.
fn scan(poly: &[[f64; 2]], cfg: &RasterConfig) -> BTreeSet<(usize, usize)> {
    let p = cfg.pixels;
    (0..p)
        .flat_map(|r| (0..p).map(move |c| (r, c)))
        .filter(|&(r, c)| inside(poly, cfg.pixel_center(r, c)))
        .collect()
}

fn segment_distance(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 { 0.0 } else { (((q[0] - a[0]) * d[0] + (q[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) };
    let e = [a[0] + t * d[0] - q[0], a[1] + t * d[1] - q[1]];
    (e[0] * e[0] + e[1] * e[1]).sqrt()
}

/// Value ranges per layer, and nothing painted outside the ego footprint,
/// the agent footprints and the cells a boundary passes through.
pub fn layer_ranges(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..FRAMES {
        let s = random_scene(&mut rng);
        let img = rasterize_frame(&s.frame, &s.map, &s.cfg);
        let cfg = &s.cfg;
        let fail = |what: &str| Err(format!("frame {case}: {what}"));
        if img.as_slice().iter().any(|v| !v.is_finite()) {
            return fail("non-finite pixel");
        }
        if img.layer(0).iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("ego layer outside [0, 1]");
        }
        for l in [1, 2] {
            if img.layer(l).iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return fail("velocity layer outside [-1, 1]");
            }
        }
        if img.layer(3).iter().any(|&v| v != 0.0 && v != 1.0) {
            return fail("boundary layer not binary");
        }
        let (hl, hw) = (cfg.ego_length / 2.0, cfg.ego_width / 2.0);
        let ego_cells = scan(&[[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]], cfg);
        if !pixel_set(&img, 0).is_subset(&ego_cells) {
            return fail("ego layer painted outside the ego footprint");
        }
        let ego = &s.frame.ego.pose;
        let agent_cells: BTreeSet<(usize, usize)> = s
            .frame
            .agents
            .iter()
            .flat_map(|a| scan(&a.polygon.iter().map(|&p| to_ego_frame(ego, p)).collect::<Vec<_>>(), cfg))
            .collect();
        for l in [1, 2] {
            if !pixel_set(&img, l).is_subset(&agent_cells) {
                return fail("velocity layer painted outside every agent");
            }
        }
        let half_diag = cfg.resolution() * std::f64::consts::SQRT_2 / 2.0 + 1e-9;
        let segments: Vec<([f64; 2], [f64; 2])> = s
            .map
            .boundaries
            .iter()
            .flat_map(|l| l.windows(2).map(|w| (to_ego_frame(ego, w[0]), to_ego_frame(ego, w[1]))))
            .collect();
        for (r, c) in pixel_set(&img, 3) {
            let q = cfg.pixel_center(r, c);
            if !segments.iter().any(|&(a, b)| segment_distance(q, a, b) <= half_diag) {
                return fail("boundary pixel far from every boundary segment");
            }
        }
    }
    Ok(FRAMES)
}

/// The ego footprint occupies the same pixels in every frame, valued by
/// the normalized speed.
pub fn ego_position(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RasterConfig::default();
    let mut reference: Option<BTreeSet<(usize, usize)>> = None;
    for case in 0..FRAMES {
        let mut s = random_scene(&mut rng);
        s.cfg = cfg;
        let img = rasterize_frame(&s.frame, &s.map, &cfg);
        let cells = pixel_set(&img, 0);
        let want = (s.frame.ego.speed / cfg.v_max).clamp(0.0, 1.0) as f32;
        if cells.iter().any(|&(r, c)| img.get(0, r, c) != want) {
            return Err(format!("frame {case}: ego pixels do not carry the normalized speed"));
        }
        match &reference {
            None => reference = Some(cells),
            Some(r) if *r != cells => return Err(format!("frame {case}: ego footprint moved")),
            Some(_) => {}
        }
    }
    Ok(FRAMES)
}

/// Agent support equals a brute-force point-in-polygon scan over all P²
/// pixel centers; single-agent frames also match on the rendered layers.
pub fn polygon_scan(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = 0;
    while frames < FRAMES {
        let s = random_scene(&mut rng);
        let ego = &s.frame.ego.pose;
        for a in &s.frame.agents {
            let local: Vec<[f64; 2]> = a.polygon.iter().map(|&p| to_ego_frame(ego, p)).collect();
            let fast: BTreeSet<(usize, usize)> = polygon_pixels(&local, &s.cfg).into_iter().collect();
            if fast != scan(&local, &s.cfg) {
                return Err(format!("frame {frames}: polygon fill differs from the brute-force scan"));
            }
        }
        if let [a] = s.frame.agents.as_slice() {
            let img = rasterize_frame(&s.frame, &s.map, &s.cfg);
            let local: Vec<[f64; 2]> = a.polygon.iter().map(|&p| to_ego_frame(ego, p)).collect();
            let support: BTreeSet<_> = pixel_set(&img, 1).union(&pixel_set(&img, 2)).copied().collect();
            if support != scan(&local, &s.cfg) {
                return Err(format!("frame {frames}: rendered agent footprint differs from the brute-force scan"));
            }
        }
        frames += 1;
    }
    debug_assert!(NUM_LAYERS == 4);
    Ok(FRAMES)
}

pub fn all(seed: u64) -> Result<Vec<(&'static str, usize)>, String> {
    Ok(vec![
        ("rigid-transform invariance", rigid_invariance(seed)?),
        ("layer ranges", layer_ranges(seed + 1)?),
        ("ego position", ego_position(seed + 2)?),
        ("point-in-polygon count", polygon_scan(seed + 3)?),
    ])
}
