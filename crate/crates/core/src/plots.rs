//! Matrix plots: pairwise sequence distances sorted by cluster and
//! frame-to-frame similarity within a sequence. Each plot is written as a
//! PNG and as a DSC1 tensor of the underlying matrix; the sequence plot
//! also gets a strip of cluster colors in sorted order.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::clustering::dist;
use crate::error::{Error, Result};
use crate::tensor_io::{write_dsc1, Tensor};

/// Height in pixels of the cluster color strip.
const BAR: u32 = 6;

/// Order that groups items by label, stable within a label.
pub fn cluster_order(labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    order
}

/// Euclidean distances between rows, in the given order.
pub fn distance_matrix(features: &[Vec<f32>], order: &[usize]) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| features[i].iter().map(|&v| v as f64).collect())
        .collect();
    rows.iter().map(|a| rows.iter().map(|b| dist(a, b)).collect()).collect()
}

/// Cosine similarity between every pair of frames.
pub fn similarity_matrix(frames: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let unit: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            let n = f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            f.iter().map(|&v| if n > 0.0 { v as f64 / n } else { 0.0 }).collect()
        })
        .collect();
    unit.iter()
        .map(|a| unit.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Maps t in [0, 1] to a dark-blue → yellow ramp.
fn ramp(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let r = (255.0 * t.powf(0.8)) as u8;
    let g = (40.0 + 200.0 * t) as u8;
    let b = (120.0 * (1.0 - t) + 20.0) as u8;
    Rgb([r, g, b])
}

fn label_color(label: usize) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    Rgb(PALETTE[label % PALETTE.len()])
}

/// Heat map of a square matrix, one pixel per entry.
pub fn matrix_image(m: &[Vec<f64>]) -> RgbImage {
    let n = m.len() as u32;
    let (lo, hi) = m
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let lo = if lo.is_finite() { lo } else { 0.0 };
    let mut img = RgbImage::new(n, n);
    for (r, row) in m.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            img.put_pixel(c as u32, r as u32, ramp((v - lo) / span));
        }
    }
    img
}

/// Cluster color strip, `BAR` pixels tall and one pixel per item.
pub fn label_bar_image(labels: &[usize]) -> RgbImage {
    let mut img = RgbImage::new(labels.len() as u32, BAR);
    for (i, &l) in labels.iter().enumerate() {
        for b in 0..BAR {
            img.put_pixel(i as u32, b, label_color(l));
        }
    }
    img
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn write_matrix(dir: &Path, stem: &str, m: &[Vec<f64>]) -> Result<()> {
    save_png(&matrix_image(m), &dir.join(format!("{stem}.png")))?;
    let rows: Vec<Vec<f32>> = m.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    write_dsc1(dir.join(format!("{stem}.dsc1")), &[Tensor::from_rows(&rows)?])
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes the cluster-sorted distance matrix of sequence features and one
/// frame-similarity matrix per probe sequence.
pub fn emit_plots(dir: &Path, seq_features: &[Vec<f32>], labels: &[usize], probes: &[(&str, &[Vec<f32>])]) -> Result<()> {
    if seq_features.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows but {} labels",
            seq_features.len(),
            labels.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let order = cluster_order(labels);
    let sorted: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    write_matrix(dir, "sequence_distances", &distance_matrix(seq_features, &order))?;
    save_png(&label_bar_image(&sorted), &dir.join("sequence_distances_labels.png"))?;
    for (id, frames) in probes {
        write_matrix(dir, &format!("frame_similarity_{}", file_stem(id)), &similarity_matrix(frames))?;
    }
    Ok(())
}
