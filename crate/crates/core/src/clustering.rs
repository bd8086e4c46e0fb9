//! K-means with k-means++ seeding and silhouette-based choice of k.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop when no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_init: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub k: usize,
    pub seed: u64,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    for (i, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(Error::shape(format!("point {i} has dimension {}, expected {d}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
    }
    Ok(d)
}

/// Nearest centroid of `p`; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a centroid.
            Err(_) => rng.gen_range(0..n),
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centroids)).unzip()
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from clusters with more than one member.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], d2: &mut [f64], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if d2[b] >= d2[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = far else { break };
        sizes[labels[i]] -= 1;
        sizes[c] = 1;
        labels[i] = c;
        d2[i] = 0.0;
        centroids[c] = points[i].clone();
    }
}

fn update_centroids(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize, old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| {
            if n == 0 {
                old[c].clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

/// One seeded Lloyd run. Also returns the inertia after each assignment.
pub(crate) fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> (ClusterAssignment, Vec<f64>) {
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut trace = Vec::new();
    let (mut labels, mut d2) = assign(points, &centroids);
    repair_empty(points, &mut labels, &mut d2, &mut centroids);
    for _ in 0..cfg.max_iter {
        trace.push(d2.iter().sum());
        let next = update_centroids(points, &labels, k, dim, &centroids);
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| dist(a, b))
            .fold(0.0, f64::max);
        centroids = next;
        (labels, d2) = assign(points, &centroids);
        repair_empty(points, &mut labels, &mut d2, &mut centroids);
        if shift < cfg.tol {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    trace.push(inertia);
    (
        ClusterAssignment {
            labels,
            centroids,
            inertia,
            k,
            seed,
        },
        trace,
    )
}

fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Best of `cfg.n_init` seeded k-means++/Lloyd runs by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    check_points(points)?;
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {}]", points.len())));
    }
    if cfg.n_init == 0 || cfg.max_iter == 0 {
        return Err(Error::config("k-means needs n_init ≥ 1 and max_iter ≥ 1"));
    }
    let runs: Vec<ClusterAssignment> = (0..cfg.n_init)
        .into_par_iter()
        .map(|r| lloyd(points, k, restart_seed(seed, r), cfg).0)
        .collect();
    let mut best = runs.into_iter().reduce(|a, b| if b.inertia < a.inertia { b } else { a }).expect("n_init ≥ 1");
    best.seed = seed;
    Ok(best)
}

/// Mean silhouette coefficient over all points. Points in singleton
/// clusters score 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_points(points)?;
    silhouette_with(points.len(), labels, |i, j| dist(&points[i], &points[j]))
}

/// Silhouette from a precomputed distance matrix.
pub fn silhouette_from_distances(d: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if d.iter().any(|r| r.len() != d.len()) {
        return Err(Error::shape("distance matrix must be square"));
    }
    silhouette_with(d.len(), labels, |i, j| d[i][j])
}

fn silhouette_with(n: usize, labels: &[usize], dist: impl Fn(usize, usize) -> f64 + Sync) -> Result<f64> {
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} points", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least two non-empty clusters"));
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in (0..n).filter(|&j| j != i) {
                sums[labels[j]] += dist(i, j);
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    /// `(k, silhouette)` for every candidate.
    pub table: Vec<(usize, f64)>,
    pub assignment: ClusterAssignment,
}

/// Runs k-means for every k in `k_min..=k_max` and keeps the highest
/// silhouette; ties go to the smaller k.
pub fn select_num_clusters(
    points: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<KSelection> {
    if k_min < 2 || k_min > k_max || k_max >= points.len() {
        return Err(Error::invalid(format!(
            "cluster range [{k_min}, {k_max}] must satisfy 2 ≤ k_min ≤ k_max < N = {}",
            points.len()
        )));
    }
    let mut best: Option<(f64, ClusterAssignment)> = None;
    let mut table = Vec::new();
    for k in k_min..=k_max {
        let a = kmeans(points, k, seed, cfg)?;
        let s = silhouette_score(points, &a.labels)?;
        table.push((k, s));
        if best.as_ref().map_or(true, |(b, _)| s > *b) {
            best = Some((s, a));
        }
    }
    let (_, assignment) = best.expect("non-empty range");
    Ok(KSelection {
        k: assignment.k,
        table,
        assignment,
    })
}

pub fn to_f64_rows(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        centers
            .iter()
            .flat_map(|c| {
                (0..per)
                    .map(|_| {
                        let dx: f64 = rng.sample(StandardNormal);
                        let dy: f64 = rng.sample(StandardNormal);
                        vec![c[0] + sigma * dx, c[1] + sigma * dy]
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let pts = blobs(&[[1.0, 2.0]], 30, 1.0, 0);
        let a = kmeans(&pts, 1, 0, &KMeansConfig::default()).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 30.0).collect();
        assert!(dist(&a.centroids[0], &mean) < 1e-12);
        let tot: f64 = pts.iter().map(|p| sq_dist(p, &mean)).sum();
        assert!((a.inertia - tot).abs() < 1e-9);
    }

    #[test]
    fn two_blobs_are_recovered() {
        let pts = blobs(&[[0.0, 0.0], [10.0, 0.0]], 25, 1.0, 1);
        let a = kmeans(&pts, 2, 3, &KMeansConfig::default()).unwrap();
        assert!(a.labels[..25].iter().all(|&l| l == a.labels[0]));
        assert!(a.labels[25..].iter().all(|&l| l == a.labels[25]));
        assert_ne!(a.labels[0], a.labels[25]);
    }

    #[test]
    fn k_equal_n_has_zero_inertia() {
        let pts = blobs(&[[0.0, 0.0]], 12, 1.0, 2);
        let a = kmeans(&pts, 12, 0, &KMeansConfig::default()).unwrap();
        assert!(a.inertia < 1e-12);
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = vec![vec![1.0, 1.0]; 6];
        let a = kmeans(&pts, 3, 0, &KMeansConfig::default()).unwrap();
        let mut seen = a.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let pts = blobs(&[[0.0, 0.0]], 3, 1.0, 0);
        assert!(kmeans(&pts, 4, 0, &KMeansConfig::default()).is_err());
        assert!(kmeans(&[vec![f64::NAN]], 1, 0, &KMeansConfig::default()).is_err());
        assert!(silhouette_score(&pts, &[0, 0, 0]).is_err());
        assert!(select_num_clusters(&pts, 1, 2, 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn inertia_never_increases_within_a_run() {
        let pts = blobs(&[[0.0, 0.0], [4.0, 1.0], [1.0, 5.0]], 40, 1.5, 4);
        for seed in 0..5 {
            let (_, trace) = lloyd(&pts, 5, seed, &KMeansConfig::default());
            assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{trace:?}");
        }
    }

    #[test]
    fn coincident_clusters_have_silhouette_one() {
        let pts = vec![vec![0.0], vec![0.0], vec![9.0], vec![9.0]];
        assert_eq!(silhouette_score(&pts, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn three_blobs_select_three() {
        let pts = blobs(&[[0.0, 0.0], [12.0, 0.0], [6.0, 10.0]], 20, 1.0, 5);
        let sel = select_num_clusters(&pts, 2, 6, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(sel.k, 3);
        assert_eq!(sel.table.len(), 5);
        let one = select_num_clusters(&pts, 4, 4, 0, &KMeansConfig::default()).unwrap();
        assert_eq!((one.k, one.table.len()), (4, 1));
    }
}
