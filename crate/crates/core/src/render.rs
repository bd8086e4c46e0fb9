//! Ego-centric four-layer rasterization of driving frames.
//!
//! Every frame is drawn in the instantaneous ego frame: the ego pose is the
//! origin, the longitudinal axis follows the ego heading and the lateral axis
//! points 90° counter-clockwise from it. The ego vehicle therefore always
//! occupies the same centered pixels.
//!
//! | layer | content                                      | range     |
//! |-------|----------------------------------------------|-----------|
//! | 0     | ego footprint, normalized ego speed          | `[0, 1]`  |
//! | 1     | agent footprints, longitudinal velocity      | `[-1, 1]` |
//! | 2     | agent footprints, lateral velocity           | `[-1, 1]` |
//! | 3     | lane boundaries, 1-pixel polylines           | `{0, 1}`  |
//!
//! Geometry is evaluated in `f64` and only the stored pixel values are `f32`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Frame, LaneMap, Pose2D, Sequence};
use crate::error::{Error, Result};

pub const NUM_LAYERS: usize = 4;
pub const LAYER_EGO: usize = 0;
pub const LAYER_LON: usize = 1;
pub const LAYER_LAT: usize = 2;
pub const LAYER_LANES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Pixels per side; odd so the ego sits on an exact center pixel.
    pub pixels: usize,
    /// Side length of the rendered square in meters.
    pub extent: f64,
    /// Speed mapped to a pixel value of 1.
    pub v_max: f64,
    pub ego_length: f64,
    pub ego_width: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            pixels: 129,
            extent: 100.0,
            v_max: 20.0,
            ego_length: 4.8,
            ego_width: 1.8,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixels == 0 || self.pixels % 2 == 0 {
            return Err(Error::config(format!(
                "raster pixels must be odd and positive, got {}",
                self.pixels
            )));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::config("raster extent must be positive"));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::config("raster v_max must be positive"));
        }
        if !(self.ego_length > 0.0 && self.ego_width > 0.0) {
            return Err(Error::config("ego footprint must have positive size"));
        }
        Ok(())
    }

    /// Meters per pixel.
    pub fn resolution(&self) -> f64 {
        self.extent / self.pixels as f64
    }

    fn center_index(&self) -> f64 {
        (self.pixels as f64 - 1.0) / 2.0
    }

    /// Ego-frame coordinates `(lon, lat)` of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let c = self.center_index();
        let r = self.resolution();
        [(c - row as f64) * r, (c - col as f64) * r]
    }
}

/// Rigid transform of a world point into the ego frame `(lon, lat)`.
pub fn to_ego_frame(ego: &Pose2D, point: [f64; 2]) -> [f64; 2] {
    let dx = point[0] - ego.x;
    let dy = point[1] - ego.y;
    let (s, c) = ego.heading.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Projects a world velocity onto the ego longitudinal and lateral axes.
pub fn decompose_velocity(ego: &Pose2D, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = ego.heading.sin_cos();
    [v[0] * c + v[1] * s, -v[0] * s + v[1] * c]
}

/// Pixel containing an ego-frame point, or `None` outside the rendered square.
/// Ahead is up (row decreases with lon), left is left (col decreases with lat).
pub fn world_to_pixel(local: [f64; 2], cfg: &RasterConfig) -> Option<(usize, usize)> {
    let half = cfg.extent / 2.0;
    let r = cfg.resolution();
    let row = ((half - local[0]) / r).floor();
    let col = ((half - local[1]) / r).floor();
    let p = cfg.pixels as f64;
    if row >= 0.0 && row < p && col >= 0.0 && col < p {
        Some((row as usize, col as usize))
    } else {
        None
    }
}

/// One rendered frame: `4 × P × P`, layer-major, row-major within a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pixels: usize,
    data: Vec<f32>,
}

impl FrameImage {
    pub fn zeros(pixels: usize) -> Self {
        Self {
            pixels,
            data: vec![0.0; NUM_LAYERS * pixels * pixels],
        }
    }

    pub fn from_vec(pixels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_LAYERS * pixels * pixels {
            return Err(Error::shape(format!(
                "expected {} values for a {pixels}px image, got {}",
                NUM_LAYERS * pixels * pixels,
                data.len()
            )));
        }
        Ok(Self { pixels, data })
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn layer(&self, layer: usize) -> &[f32] {
        let n = self.pixels * self.pixels;
        &self.data[layer * n..(layer + 1) * n]
    }

    pub fn get(&self, layer: usize, row: usize, col: usize) -> f32 {
        self.data[(layer * self.pixels + row) * self.pixels + col]
    }

    fn set(&mut self, layer: usize, row: usize, col: usize, v: f32) {
        self.data[(layer * self.pixels + row) * self.pixels + col] = v;
    }
}

/// Pixels whose centers fall inside an ego-frame polygon (even-odd rule).
///
/// Row by row, the polygon edges are intersected with the line through the
/// row's pixel centers; a pixel is inside when its center lies in
/// `[x_{2j}, x_{2j+1})` of the sorted crossings.
pub fn polygon_pixels(local: &[[f64; 2]], cfg: &RasterConfig) -> Vec<(usize, usize)> {
    let n = local.len();
    let mut out = Vec::new();
    if n < 3 {
        return out;
    }
    let p = cfg.pixels;
    let res = cfg.resolution();
    let c = cfg.center_index();
    let (mut lo_lon, mut hi_lon) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in local {
        lo_lon = lo_lon.min(v[0]);
        hi_lon = hi_lon.max(v[0]);
    }
    // Candidate rows, padded by one so the exact predicate decides.
    let row_min = ((c - hi_lon / res).floor() - 1.0).max(0.0) as usize;
    let row_max_f = (c - lo_lon / res).ceil() + 1.0;
    if row_max_f < 0.0 {
        return out;
    }
    let row_max = (row_max_f as usize).min(p - 1);
    let mut crossings = Vec::with_capacity(n);
    for row in row_min..=row_max {
        let lon_c = cfg.pixel_center(row, 0)[0];
        crossings.clear();
        for i in 0..n {
            let a = local[i];
            let b = local[(i + 1) % n];
            if (a[0] > lon_c) != (b[0] > lon_c) {
                crossings.push(a[1] + (lon_c - a[0]) * (b[1] - a[1]) / (b[0] - a[0]));
            }
        }
        crossings.sort_by(|x, y| x.total_cmp(y));
        for pair in crossings.chunks_exact(2) {
            let (xa, xb) = (pair[0], pair[1]);
            let col_lo = ((c - xb / res).floor() - 1.0).max(0.0);
            let col_hi = (c - xa / res).ceil() + 1.0;
            if col_hi < 0.0 {
                continue;
            }
            let (col_lo, col_hi) = (col_lo as usize, (col_hi as usize).min(p - 1));
            for col in col_lo..=col_hi {
                let lat_c = cfg.pixel_center(row, col)[1];
                if xa <= lat_c && lat_c < xb {
                    out.push((row, col));
                }
            }
        }
    }
    out
}

/// Liang–Barsky clip of segment `a→b` against the square `|x|,|y| ≤ half`.
fn clip_segment(a: [f64; 2], b: [f64; 2], half: f64) -> Option<([f64; 2], [f64; 2])> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        for (p, q) in [(-d[axis], a[axis] + half), (d[axis], half - a[axis])] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let t = q / p;
                if p < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
                if t0 > t1 {
                    return None;
                }
            }
        }
    }
    Some((
        [a[0] + t0 * d[0], a[1] + t0 * d[1]],
        [a[0] + t1 * d[0], a[1] + t1 * d[1]],
    ))
}

/// Cells visited by the segment, via Amanatides–Woo grid traversal.
/// Endpoints are ego-frame coordinates already clipped to the view.
fn segment_pixels(a: [f64; 2], b: [f64; 2], cfg: &RasterConfig, out: &mut Vec<(usize, usize)>) {
    let half = cfg.extent / 2.0;
    let res = cfg.resolution();
    let p = cfg.pixels as i64;
    // Continuous grid coordinates: u along rows, v along columns.
    let (u0, v0) = ((half - a[0]) / res, (half - a[1]) / res);
    let (u1, v1) = ((half - b[0]) / res, (half - b[1]) / res);
    let clamp = |x: f64| (x.floor() as i64).clamp(0, p - 1);
    let (mut row, mut col) = (clamp(u0), clamp(v0));
    let (end_row, end_col) = (clamp(u1), clamp(v1));
    let (du, dv) = (u1 - u0, v1 - v0);
    let step_r: i64 = if du > 0.0 { 1 } else { -1 };
    let step_c: i64 = if dv > 0.0 { 1 } else { -1 };
    let next_boundary = |cell: i64, step: i64| if step > 0 { (cell + 1) as f64 } else { cell as f64 };
    let mut t_max_r = if du != 0.0 {
        (next_boundary(row, step_r) - u0) / du
    } else {
        f64::INFINITY
    };
    let mut t_max_c = if dv != 0.0 {
        (next_boundary(col, step_c) - v0) / dv
    } else {
        f64::INFINITY
    };
    let t_delta_r = if du != 0.0 { 1.0 / du.abs() } else { f64::INFINITY };
    let t_delta_c = if dv != 0.0 { 1.0 / dv.abs() } else { f64::INFINITY };
    let max_steps = 2 * p as usize + 4;
    out.push((row as usize, col as usize));
    for _ in 0..max_steps {
        if row == end_row && col == end_col {
            break;
        }
        if t_max_r < t_max_c {
            if t_max_r > 1.0 {
                break;
            }
            row += step_r;
            t_max_r += t_delta_r;
        } else {
            if t_max_c > 1.0 {
                break;
            }
            col += step_c;
            t_max_c += t_delta_c;
        }
        if !(0..p).contains(&row) || !(0..p).contains(&col) {
            break;
        }
        out.push((row as usize, col as usize));
    }
}

/// Renders one frame into a four-layer image.
pub fn rasterize_frame(frame: &Frame, map: &LaneMap, cfg: &RasterConfig) -> FrameImage {
    let mut img = FrameImage::zeros(cfg.pixels);
    let ego = &frame.ego.pose;

    let (hl, hw) = (cfg.ego_length / 2.0, cfg.ego_width / 2.0);
    let ego_rect = [[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]];
    let ego_value = (frame.ego.speed / cfg.v_max).clamp(0.0, 1.0) as f32;
    for (r, c) in polygon_pixels(&ego_rect, cfg) {
        img.set(LAYER_EGO, r, c, ego_value);
    }

    let half = cfg.extent / 2.0;
    let mut local = Vec::new();
    for agent in &frame.agents {
        local.clear();
        local.extend(agent.polygon.iter().map(|&p| to_ego_frame(ego, p)));
        let outside = local.iter().all(|v| v[0] > half)
            || local.iter().all(|v| v[0] < -half)
            || local.iter().all(|v| v[1] > half)
            || local.iter().all(|v| v[1] < -half);
        if outside {
            continue;
        }
        let [v_lon, v_lat] = decompose_velocity(ego, agent.velocity);
        let lon_value = (v_lon / cfg.v_max).clamp(-1.0, 1.0) as f32;
        let lat_value = (v_lat / cfg.v_max).clamp(-1.0, 1.0) as f32;
        for (r, c) in polygon_pixels(&local, cfg) {
            img.set(LAYER_LON, r, c, lon_value);
            img.set(LAYER_LAT, r, c, lat_value);
        }
    }

    let mut cells = Vec::new();
    for line in &map.boundaries {
        for seg in line.windows(2) {
            let a = to_ego_frame(ego, seg[0]);
            let b = to_ego_frame(ego, seg[1]);
            if let Some((ca, cb)) = clip_segment(a, b, half) {
                segment_pixels(ca, cb, cfg, &mut cells);
            }
        }
    }
    for &(r, c) in &cells {
        img.set(LAYER_LANES, r, c, 1.0);
    }
    img
}

/// Renders every frame of a sequence, in order.
pub fn render_sequence(seq: &Sequence, map: &LaneMap, cfg: &RasterConfig) -> Vec<FrameImage> {
    seq.frames
        .iter()
        .map(|f| rasterize_frame(f, map, cfg))
        .collect()
}

/// Renders a whole dataset, sequences in parallel.
pub fn render_dataset(dataset: &Dataset, cfg: &RasterConfig) -> Result<Vec<Vec<FrameImage>>> {
    cfg.validate()?;
    dataset
        .sequences
        .par_iter()
        .map(|seq| Ok(render_sequence(seq, dataset.map_for(seq)?, cfg)))
        .collect()
}
