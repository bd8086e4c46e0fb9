//! Loss and metric implementations checked against slow, literal
//! re-derivations on small random instances.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drivecluster::baseline::dtw_distance;
use drivecluster::clustering::silhouette_score;
use drivecluster::frame_codec::{reconstruction_loss, triplet_loss, FrameCodec, FrameTripletBatch};
use drivecluster::sequence_codec::{local_aggregation_loss, neighbor_probability, normalize, rp_loss, NeighborSets};

pub const INSTANCES: usize = 100;

fn check(name: &str, case: usize, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol * want.abs().max(1.0) {
        Ok(())
    } else {
        Err(format!("{name} instance {case}: got {got}, oracle {want}"))
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| normalize(&normal(rng, d, 1.0))).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    sq(a, b).sqrt()
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize, min: usize) -> Vec<usize> {
    loop {
        let s: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
        if s.len() >= min {
            return s;
        }
    }
}

/// Mean over anchors of `[d⁺ − d(a, far) + α]₊ + [d⁺ − d(a, cross) + α]₊`.
pub fn triplet(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..INSTANCES {
        let seqs = rng.gen_range(2..4);
        let len = rng.gen_range(6..10);
        let tags: Vec<(usize, usize)> = (0..seqs).flat_map(|i| (0..len).map(move |k| (i, k))).collect();
        let row = |i: usize, k: usize| i * len + k;
        let mut groups = Vec::new();
        for _ in 0..rng.gen_range(1..6) {
            let i = rng.gen_range(0..seqs);
            let k = rng.gen_range(0..len);
            let near_gap = rng.gen_range(0..3);
            let candidates: Vec<usize> = (0..len).filter(|&n| k.abs_diff(n) > near_gap).collect();
            let Some(&n) = candidates.choose(&mut rng) else { continue };
            let m = if k + near_gap < len { k + near_gap } else { k - near_gap };
            let j = (i + rng.gen_range(1..seqs)) % seqs;
            groups.push([row(i, k), row(i, m), row(i, n), row(j, m.min(len - 1))]);
        }
        if groups.is_empty() {
            continue;
        }
        let dim = rng.gen_range(1..6);
        let feats: Vec<Vec<f64>> = (0..tags.len()).map(|_| normal(&mut rng, dim, 0.8)).collect();
        let alpha = rng.gen_range(0.1..2.0);
        let batch = FrameTripletBatch { tags, groups: groups.clone() };
        let got = triplet_loss(&batch, &feats, alpha).map_err(|e| e.to_string())?;
        let mut want = 0.0;
        for g in &groups {
            let pos = sq(&feats[g[0]], &feats[g[1]]);
            want += f64::max(0.0, pos - sq(&feats[g[0]], &feats[g[2]]) + alpha);
            want += f64::max(0.0, pos - sq(&feats[g[0]], &feats[g[3]]) + alpha);
        }
        want /= groups.len() as f64;
        check("triplet", case, got, want, 1e-9)?;
    }
    Ok(INSTANCES)
}

/// Elementwise squared error, averaged per head; a head left empty adds 0.
pub fn rp(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..INSTANCES {
        let d = rng.gen_range(1..6);
        let head = |rng: &mut ChaCha8Rng, present: bool| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let t = if present { rng.gen_range(1..8) } else { 0 };
            let a = (0..t).map(|_| normal(rng, d, 2.0)).collect();
            let b = (0..t).map(|_| normal(rng, d, 2.0)).collect();
            (a, b)
        };
        let (r, rt) = head(&mut rng, true);
        let drop_pred = rng.gen_bool(0.25);
        let (p, pt) = head(&mut rng, !drop_pred);
        let got = rp_loss(&r, &rt, &p, &pt).map_err(|e| e.to_string())?;
        let mse = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            if a.is_empty() {
                return 0.0;
            }
            let mut s = 0.0;
            let mut n = 0.0;
            for t in 0..a.len() {
                for j in 0..d {
                    s += (a[t][j] - b[t][j]).powi(2);
                    n += 1.0;
                }
            }
            s / n
        };
        check("rp_loss", case, got, mse(&r, &rt) + mse(&p, &pt), 1e-6)?;
    }
    Ok(INSTANCES)
}

/// Softmax of `y_jᵀy/τ` without any stabilization, summed over the set.
fn softmax_mass(y: &[f64], set: &[usize], feats: &[Vec<f64>], tau: f64) -> f64 {
    let w = |j: usize| (feats[j].iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
    let total: f64 = (0..feats.len()).map(w).sum();
    set.iter().map(|&j| w(j)).sum::<f64>() / total
}

pub fn neighbor_prob(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..INSTANCES {
        let n = rng.gen_range(2..10);
        let dim = rng.gen_range(2..6);
        let feats = unit_vectors(&mut rng, n, dim);
        let y = feats[rng.gen_range(0..n)].clone();
        let a = random_subset(&mut rng, n, 1);
        let tau = rng.gen_range(0.05..2.0);
        let got = neighbor_probability(&y, &a, &feats, tau).map_err(|e| e.to_string())?;
        check("P(A|y)", case, got, softmax_mass(&y, &a, &feats, tau), 1e-9)?;
    }
    Ok(INSTANCES)
}

pub fn local_aggregation(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..INSTANCES {
        let n = rng.gen_range(4..12);
        let dim = rng.gen_range(2..6);
        let feats = unit_vectors(&mut rng, n, dim);
        let background: Vec<Vec<usize>> = (0..n).map(|_| random_subset(&mut rng, n, 1)).collect();
        let close: Vec<Vec<usize>> = (0..n).map(|_| random_subset(&mut rng, n, 0)).collect();
        let i = rng.gen_range(0..n);
        let tau = rng.gen_range(0.05..1.0);
        let sets = NeighborSets { background: background.clone(), close: close.clone() };
        let got = local_aggregation_loss(i, &feats, &sets, tau).map_err(|e| e.to_string())?;
        let union: Vec<usize> = close[i].iter().chain(&background[i]).copied().collect::<BTreeSet<_>>().into_iter().collect();
        let want = -(softmax_mass(&feats[i], &union, &feats, tau) / softmax_mass(&feats[i], &background[i], &feats, tau)).ln();
        check("L^la", case, got, want, 1e-9)?;
    }
    Ok(INSTANCES)
}

pub fn silhouette(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < INSTANCES {
        let n = rng.gen_range(3..25);
        let d = rng.gen_range(1..4);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| normal(&mut rng, d, 3.0)).collect();
        let k = rng.gen_range(2..6);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
            continue;
        }
        let got = silhouette_score(&pts, &labels).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for i in 0..n {
            let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if own.is_empty() {
                continue;
            }
            let a = own.iter().map(|&j| euclid(&pts[i], &pts[j])).sum::<f64>() / own.len() as f64;
            let mut b = f64::INFINITY;
            for c in 0..k {
                let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c && c != labels[i]).collect();
                if !other.is_empty() {
                    b = b.min(other.iter().map(|&j| euclid(&pts[i], &pts[j])).sum::<f64>() / other.len() as f64);
                }
            }
            if a.max(b) > 0.0 {
                total += (b - a) / a.max(b);
            }
        }
        check("silhouette", done, got, total / n as f64, 1e-9)?;
        done += 1;
    }
    Ok(INSTANCES)
}

/// Minimum cost over every monotone warping path, by enumeration.
fn dtw_enumerate(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, cost: f64, best: &mut f64) {
        let cost = cost + euclid(&a[i], &b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(cost);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, cost, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, cost, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, cost, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

/// Top-down memoized recurrence `D(i,j) = c(i,j) + min(D(i−1,j), D(i,j−1), D(i−1,j−1))`.
fn dtw_memo(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn d(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, memo: &mut HashMap<(usize, usize), f64>) -> f64 {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let c = euclid(&a[i], &b[j]);
        let v = match (i, j) {
            (0, 0) => c,
            (0, _) => c + d(a, b, 0, j - 1, memo),
            (_, 0) => c + d(a, b, i - 1, 0, memo),
            _ => c + d(a, b, i - 1, j, memo).min(d(a, b, i, j - 1, memo)).min(d(a, b, i - 1, j - 1, memo)),
        };
        memo.insert((i, j), v);
        v
    }
    d(a, b, a.len() - 1, b.len() - 1, &mut HashMap::new())
}

pub fn dtw(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = |rng: &mut ChaCha8Rng, len: usize, d: usize| -> Vec<Vec<f64>> { (0..len).map(|_| normal(rng, d, 2.0)).collect() };
    for case in 0..INSTANCES {
        let d = rng.gen_range(1..4);
        let (la, lb) = (rng.gen_range(1..6), rng.gen_range(1..8));
        let (a, b) = (series(&mut rng, la, d), series(&mut rng, lb, d));
        let got = dtw_distance(&a, &b).map_err(|e| e.to_string())?;
        check("DTW (paths)", case, got, dtw_enumerate(&a, &b), 1e-9)?;
        let (la, lb) = (rng.gen_range(1..21), rng.gen_range(1..21));
        let (a, b) = (series(&mut rng, la, d), series(&mut rng, lb, d));
        let got = dtw_distance(&a, &b).map_err(|e| e.to_string())?;
        check("DTW (recurrence)", case, got, dtw_memo(&a, &b), 1e-9)?;
    }
    Ok(2 * INSTANCES)
}

/// Reconstruction MSE on raw tensors and on a codec's own decoder output.
pub fn reconstruction(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..INSTANCES {
        let n = rng.gen_range(1..200);
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = reconstruction_loss(&x, &y).map_err(|e| e.to_string())?;
        let mut s = 0.0;
        for i in 0..n {
            s += (f64::from(x[i]) - f64::from(y[i])).powi(2);
        }
        check("recon MSE", case, got, s / n as f64, 1e-6)?;
    }
    let cfg = drivecluster::frame_codec::FrameCodecConfig {
        omega: 0.0,
        kl_weight: 0.0,
        ..Default::default()
    };
    for case in 0..INSTANCES {
        let mut model: FrameCodec<f64> = FrameCodec::new(9, 3, &[2, 2], case as u64).map_err(|e| e.to_string())?;
        let batch = rng.gen_range(1..4);
        let images: Vec<f64> = (0..batch * 4 * 81).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise = vec![0.0; batch * 3];
        let loss = model.loss_and_backward(&images, &noise, &[], &cfg).map_err(|e| e.to_string())?;
        let (mu, _, _) = model.encode_forward(&images, batch).map_err(|e| e.to_string())?;
        let (x_hat, _) = model.decode_forward(&mu, batch).map_err(|e| e.to_string())?;
        let mut s = 0.0;
        for i in 0..images.len() {
            s += (x_hat[i] - images[i]).powi(2);
        }
        check("codec recon MSE", case, loss.recon, s / images.len() as f64, 1e-6)?;
    }
    Ok(2 * INSTANCES)
}

/// Every oracle, with the number of instances each checked.
pub fn all(seed: u64) -> Result<Vec<(&'static str, usize)>, String> {
    Ok(vec![
        ("triplet", triplet(seed)?),
        ("rp_loss", rp(seed + 1)?),
        ("L^la", local_aggregation(seed + 2)?),
        ("P(i|y)", neighbor_prob(seed + 3)?),
        ("silhouette", silhouette(seed + 4)?),
        ("DTW", dtw(seed + 5)?),
        ("reconstruction MSE", reconstruction(seed + 6)?),
    ])
}
