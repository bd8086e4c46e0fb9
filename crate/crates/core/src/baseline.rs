//! Benchmark clustering: handcrafted per-frame speed/gap/count series,
//! PCA compression, DTW distances and k-medoids.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{dist, silhouette_from_distances};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::render::to_ego_frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Side of the square window around the ego, m.
    pub extent: f64,
    pub n_components: usize,
    /// Fixed cluster count; `None` selects by silhouette in `k_range`.
    pub k: Option<usize>,
    pub k_range: [usize; 2],
    /// Largest data-set the DTW matrix is computed for.
    pub n_max: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            extent: 100.0,
            n_components: 2,
            k: None,
            k_range: [2, 10],
            n_max: 200,
        }
    }
}

/// Per frame: `[ego speed, nearest-agent distance capped at extent/2,
/// agents inside the extent window]`.
pub fn handcrafted_features(seq: &Sequence, extent: f64) -> Vec<Vec<f64>> {
    let half = extent / 2.0;
    seq.frames
        .iter()
        .map(|f| {
            let mut gap = half;
            let mut count = 0usize;
            for a in &f.agents {
                let [lon, lat] = to_ego_frame(&f.ego.pose, a.centroid());
                gap = gap.min(lon.hypot(lat));
                if lon.abs() <= half && lat.abs() <= half {
                    count += 1;
                }
            }
            vec![f.ego.speed, gap, count as f64]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Principal axes as rows, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    /// Fits on every frame vector of every series.
    pub fn fit(series: &[Vec<Vec<f64>>], n_components: usize) -> Result<Self> {
        let rows: Vec<&Vec<f64>> = series.iter().flatten().collect();
        let d = rows.first().map(|r| r.len()).ok_or_else(|| Error::invalid("PCA needs at least one frame"))?;
        if n_components == 0 || n_components > d {
            return Err(Error::invalid(format!("n_components = {n_components} must lie in [1, {d}]")));
        }
        if rows.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("PCA input rows must be finite and equally long"));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in &rows {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
                }
            }
        }
        let total: f64 = (0..d).map(|j| cov[(j, j)]).sum();
        if !(total > 1e-12) {
            return Err(Error::invalid("PCA input has zero variance"));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let components = order[..n_components]
            .iter()
            .map(|&c| {
                let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                // Sign convention: largest-magnitude entry positive.
                let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if big < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        let explained_ratio = order[..n_components]
            .iter()
            .map(|&c| eig.eigenvalues[c].max(0.0) / total)
            .collect();
        Ok(Self {
            mean,
            components,
            explained_ratio,
        })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect()
    }
}

/// Fits PCA on the stacked frames and projects every series.
pub fn pca_fit_transform(series: &[Vec<Vec<f64>>], n_components: usize) -> Result<(Vec<Vec<Vec<f64>>>, Pca)> {
    let pca = Pca::fit(series, n_components)?;
    let out = series.iter().map(|s| s.iter().map(|r| pca.transform(r)).collect()).collect();
    Ok((out, pca))
}

/// Classic DTW with Euclidean step cost and match/insert/delete steps.
pub fn dtw_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("DTW needs two non-empty series"));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            cur[j] = dist(x, &b[j - 1]) + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Symmetric DTW distance matrix with a zero diagonal.
pub fn distance_matrix(series: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let n = series.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| dtw_distance(&series[i], &series[j])).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for (off, &v) in upper[i].iter().enumerate() {
            let j = i + 1 + off;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

fn medoid_cost(d: &[Vec<f64>], medoids: &[usize]) -> f64 {
    d.iter()
        .map(|row| medoids.iter().map(|&m| row[m]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Partitioning around medoids: greedy BUILD, then best-improvement SWAP
/// until no swap lowers the total distance. Ties go to lower indices.
pub fn k_medoids(d: &[Vec<f64>], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let best = (0..n)
            .filter(|c| !medoids.contains(c))
            .map(|c| {
                let mut trial = medoids.clone();
                trial.push(c);
                (medoid_cost(d, &trial), c)
            })
            .fold((f64::INFINITY, usize::MAX), |a, b| if b.0 < a.0 { b } else { a });
        medoids.push(best.1);
    }
    let mut cost = medoid_cost(d, &medoids);
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for slot in 0..k {
            for cand in (0..n).filter(|c| !medoids.contains(c)) {
                let mut trial = medoids.clone();
                trial[slot] = cand;
                let c = medoid_cost(d, &trial);
                if c < cost - 1e-12 && best.map_or(true, |b| c < b.0) {
                    best = Some((c, slot, cand));
                }
            }
        }
        match best {
            Some((c, slot, cand)) => {
                medoids[slot] = cand;
                cost = c;
            }
            None => break,
        }
    }
    let labels = d
        .iter()
        .map(|row| {
            (0..k)
                .fold((usize::MAX, f64::INFINITY), |acc, s| if row[medoids[s]] < acc.1 { (s, row[medoids[s]]) } else { acc })
                .0
        })
        .collect();
    Ok((labels, medoids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub labels: Vec<usize>,
    pub medoids: Vec<usize>,
    pub k: usize,
    /// `(k, silhouette)` rows when k was selected automatically.
    pub silhouette_table: Vec<(usize, f64)>,
    pub explained_ratio: Vec<f64>,
    pub distances: Vec<Vec<f64>>,
}

/// Handcrafted features → PCA → DTW matrix → k-medoids.
pub fn baseline_cluster(seqs: &[&Sequence], cfg: &BaselineConfig) -> Result<BaselineResult> {
    let n = seqs.len();
    if n > cfg.n_max {
        return Err(Error::BaselineScale { n, max: cfg.n_max });
    }
    if n < 2 {
        return Err(Error::invalid("baseline needs at least two sequences"));
    }
    let series: Vec<Vec<Vec<f64>>> = seqs.iter().map(|s| handcrafted_features(s, cfg.extent)).collect();
    let (compressed, pca) = pca_fit_transform(&series, cfg.n_components)?;
    let distances = distance_matrix(&compressed)?;
    let (labels, medoids, k, table) = match cfg.k {
        Some(k) => {
            let (l, m) = k_medoids(&distances, k)?;
            (l, m, k, Vec::new())
        }
        None => {
            let [lo, hi] = cfg.k_range;
            if lo < 2 || lo > hi || hi >= n {
                return Err(Error::config(format!("baseline k range [{lo}, {hi}] must satisfy 2 ≤ lo ≤ hi < {n}")));
            }
            let mut table = Vec::new();
            let mut best: Option<(f64, Vec<usize>, Vec<usize>, usize)> = None;
            for k in lo..=hi {
                let (l, m) = k_medoids(&distances, k)?;
                let s = silhouette_from_distances(&distances, &l)?;
                table.push((k, s));
                if best.as_ref().map_or(true, |b| s > b.0) {
                    best = Some((s, l, m, k));
                }
            }
            let (_, l, m, k) = best.expect("non-empty range");
            (l, m, k, table)
        }
    };
    Ok(BaselineResult {
        labels,
        medoids,
        k,
        silhouette_table: table,
        explained_ratio: pca.explained_ratio,
        distances,
    })
}
