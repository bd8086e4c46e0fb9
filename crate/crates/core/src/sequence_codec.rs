//! Recurrent sequence codec.
//!
//! A stacked GRU reads a series of frame features and its final top-layer
//! state is projected to the sequence feature `y`. Two autoregressive GRU
//! decoders start from `y`: one reconstructs the input steps (reversed by
//! default), the other predicts the frames interleaved between them.
//! Training minimizes the reconstruction/prediction error plus a
//! local-aggregation term over unit-normalized features, with neighbour sets
//! rebuilt once per epoch.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, sq_dist, KMeansConfig};
use crate::error::{Error, Result};
use crate::frame_codec::load_params;
use crate::nn::{clip_grad_norm, Adam, GruStack, Linear, Param, Parameterized, Real, StackCache};
use crate::tensor_io::{Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Inputs at `0, 2s, 4s, …`; targets at each input index `+ s`.
    Interleaved,
    /// First half input, second half target.
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMerge {
    Union,
    Intersection,
}

/// Source indices of one training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndices {
    pub input: Vec<usize>,
    pub recon: Vec<usize>,
    pub pred: Vec<usize>,
}

pub fn pair_indices(len: usize, mode: PairMode, stride: usize, reverse: bool) -> Result<PairIndices> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if len < 2 * stride {
        return Err(Error::invalid(format!(
            "sequence too short: {len} steps, pairing needs at least {}",
            2 * stride
        )));
    }
    let (input, pred): (Vec<usize>, Vec<usize>) = match mode {
        PairMode::Interleaved => (0..len)
            .step_by(2 * stride)
            .take_while(|i| i + stride < len)
            .map(|i| (i, i + stride))
            .unzip(),
        PairMode::Split => ((0..len / 2).collect(), (len / 2..len).collect()),
    };
    let mut recon = input.clone();
    if reverse {
        recon.reverse();
    }
    Ok(PairIndices { input, recon, pred })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub indices: PairIndices,
    pub input_steps: Vec<Vec<f32>>,
    pub recon_target: Vec<Vec<f32>>,
    pub pred_target: Vec<Vec<f32>>,
}

pub fn make_training_pairs(z_seq: &[Vec<f32>], mode: PairMode, stride: usize, reverse: bool) -> Result<TrainingPair> {
    let indices = pair_indices(z_seq.len(), mode, stride, reverse)?;
    let gather = |idx: &[usize]| idx.iter().map(|&i| z_seq[i].clone()).collect();
    Ok(TrainingPair {
        input_steps: gather(&indices.input),
        recon_target: gather(&indices.recon),
        pred_target: gather(&indices.pred),
        indices,
    })
}

/// Steps the encoder reads: the training input view, or every step when the
/// sequence is too short to pair.
pub fn encoder_view(len: usize, mode: PairMode, stride: usize) -> Vec<usize> {
    match pair_indices(len, mode, stride, false) {
        Ok(p) => p.input,
        Err(_) => (0..len).collect(),
    }
}

/// Mean over time of each sequence's frame features.
pub fn average_pool(features: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    features
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let d = seq.first().map(Vec::len).ok_or_else(|| Error::invalid(format!("sequence {i} is empty")))?;
            let mut acc = vec![0.0f64; d];
            for z in seq {
                for (a, v) in acc.iter_mut().zip(z) {
                    *a += f64::from(*v);
                }
            }
            Ok(acc.into_iter().map(|a| (a / seq.len() as f64) as f32).collect())
        })
        .collect()
}

/// Mean squared error of each head; an absent head contributes 0.
pub fn rp_loss(
    recon: &[Vec<f64>],
    recon_target: &[Vec<f64>],
    pred: &[Vec<f64>],
    pred_target: &[Vec<f64>],
) -> Result<f64> {
    fn mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::shape(format!("{} output steps for {} targets", a.len(), b.len())));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (x, y) in a.iter().zip(b) {
            if x.len() != y.len() {
                return Err(Error::shape(format!("step widths {} and {}", x.len(), y.len())));
            }
            sum += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            n += x.len();
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
    Ok(mse(recon, recon_target)? + mse(pred, pred_target)?)
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `P(A | y)` under the temperature-`tau` softmax over every feature.
pub fn neighbor_probability(y: &[f64], a: &[usize], features: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if a.is_empty() || a.iter().any(|&i| i >= features.len()) {
        return Err(Error::invalid("index set must be non-empty and in range"));
    }
    let logits: Vec<f64> = features.iter().map(|f| dot(f, y) / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let set: BTreeSet<usize> = a.iter().copied().collect();
    Ok(set.iter().map(|&i| (logits[i] - m).exp()).sum::<f64>() / total)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Background neighbours `B_i` and close neighbours `C_i` for every instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSets {
    pub background: Vec<Vec<usize>>,
    pub close: Vec<Vec<usize>>,
}

impl NeighborSets {
    /// Sorted `C_i ∪ B_i`.
    pub fn members(&self, i: usize) -> Vec<usize> {
        let mut m: Vec<usize> = self.close[i].iter().chain(&self.background[i]).copied().collect();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// `-log P(C ∪ B | q) + log P(B | q)` and its gradient w.r.t. `q`, with the
/// bank held constant.
pub fn la_loss_and_grad(q: &[f64], bank: &[Vec<f64>], members: &[usize], background: &[usize], tau: f64) -> (f64, Vec<f64>) {
    let logit = |j: usize| dot(&bank[j], q) / tau;
    let lse = |set: &[usize]| -> (f64, Vec<f64>) {
        let ls: Vec<f64> = set.iter().map(|&j| logit(j)).collect();
        let m = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = ls.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = ws.iter().sum();
        (m + s.ln(), ws.into_iter().map(|w| w / s).collect())
    };
    let (l_cb, p_cb) = lse(members);
    let (l_b, p_b) = lse(background);
    let mut grad = vec![0.0; q.len()];
    for (&j, p) in members.iter().zip(&p_cb) {
        for (g, v) in grad.iter_mut().zip(&bank[j]) {
            *g -= p * v / tau;
        }
    }
    for (&j, p) in background.iter().zip(&p_b) {
        for (g, v) in grad.iter_mut().zip(&bank[j]) {
            *g += p * v / tau;
        }
    }
    (l_b - l_cb, grad)
}

/// `L^la` of instance `i` with `features` as both query and bank.
pub fn local_aggregation_loss(i: usize, features: &[Vec<f64>], sets: &NeighborSets, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let b = sets
        .background
        .get(i)
        .ok_or_else(|| Error::invalid(format!("instance {i} out of range")))?;
    if b.is_empty() {
        return Err(Error::invalid(format!("background set of instance {i} is empty")));
    }
    Ok(la_loss_and_grad(&features[i], features, &sets.members(i), b, tau).0)
}

/// `B_i`: the `k_bg` nearest other instances (ties to the lower index).
/// `C_i`: co-cluster members across one k-means run per cluster count,
/// merged by union or intersection.
pub fn build_neighbor_sets(
    features: &[Vec<f64>],
    k_bg: usize,
    cluster_counts: &[usize],
    seed: u64,
    merge: NeighborMerge,
) -> Result<NeighborSets> {
    let n = features.len();
    if k_bg == 0 || n <= k_bg {
        return Err(Error::invalid(format!("need 1 ≤ k_bg < N, got k_bg = {k_bg}, N = {n}")));
    }
    if cluster_counts.is_empty() || cluster_counts.iter().any(|&c| c == 0 || c >= n) {
        return Err(Error::invalid(format!(
            "cluster counts {cluster_counts:?} must be non-empty and each in [1, N) with N = {n}"
        )));
    }
    let background: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&features[i], &features[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut b: Vec<usize> = d[..k_bg].iter().map(|&(_, j)| j).collect();
            b.sort_unstable();
            b
        })
        .collect();
    let cfg = KMeansConfig {
        n_init: 1,
        ..KMeansConfig::default()
    };
    let runs = cluster_counts
        .iter()
        .enumerate()
        .map(|(r, &c)| kmeans(features, c, seed.wrapping_add(r as u64), &cfg).map(|a| a.labels))
        .collect::<Result<Vec<_>>>()?;
    let close = (0..n)
        .map(|i| {
            let mut acc: Option<BTreeSet<usize>> = None;
            for labels in &runs {
                let same: BTreeSet<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
                acc = Some(match (acc, merge) {
                    (None, _) => same,
                    (Some(a), NeighborMerge::Union) => &a | &same,
                    (Some(a), NeighborMerge::Intersection) => &a & &same,
                });
            }
            acc.unwrap_or_default().into_iter().collect()
        })
        .collect();
    Ok(NeighborSets { background, close })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqFlags {
    pub use_reconstruction: bool,
    pub use_prediction: bool,
    pub reverse_order: bool,
}

impl Default for SeqFlags {
    fn default() -> Self {
        Self {
            use_reconstruction: true,
            use_prediction: true,
            reverse_order: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqCodecConfig {
    /// Sequence feature width; also the GRU hidden width.
    pub seq_dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the local-aggregation term; 0 disables it.
    pub la_ratio: f64,
    pub temperature: f64,
    pub k_bg: usize,
    pub cluster_counts: Vec<usize>,
    pub neighbor_merge: NeighborMerge,
    pub pair_mode: PairMode,
    pub stride: usize,
    pub use_reconstruction: bool,
    pub use_prediction: bool,
    pub reverse_order: bool,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SeqCodecConfig {
    fn default() -> Self {
        Self {
            seq_dim: 128,
            layers: 2,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 30,
            la_ratio: 1e-4,
            temperature: 0.07,
            k_bg: 30,
            cluster_counts: vec![15, 30, 45, 60],
            neighbor_merge: NeighborMerge::Union,
            pair_mode: PairMode::Interleaved,
            stride: 1,
            use_reconstruction: true,
            use_prediction: true,
            reverse_order: true,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl SeqCodecConfig {
    /// Full-scale settings: batch 256, 200 epochs, 100 background
    /// neighbours and clusterings into 50/100/150/200 groups.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 256,
            epochs: 200,
            k_bg: 100,
            cluster_counts: vec![50, 100, 150, 200],
            ..Self::default()
        }
    }

    pub fn flags(&self) -> SeqFlags {
        SeqFlags {
            use_reconstruction: self.use_reconstruction,
            use_prediction: self.use_prediction,
            reverse_order: self.reverse_order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("sequence codec: {m}")));
        if self.seq_dim == 0 || self.layers == 0 {
            return bad("seq_dim and layers must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.la_ratio < 0.0 {
            return bad("lr must be positive; weight_decay and la_ratio nonnegative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if self.la_ratio > 0.0 && (self.k_bg == 0 || self.cluster_counts.is_empty()) {
            return bad("local aggregation needs k_bg ≥ 1 and at least one cluster count");
        }
        if !self.use_reconstruction && !self.use_prediction && self.la_ratio == 0.0 {
            return bad("every loss term is disabled");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeqEpochLoss {
    pub recon: f64,
    pub pred: f64,
    pub la: f64,
    pub total: f64,
}

/// Autoregressive head: a learned start token, a GRU whose layers all start
/// from `y`, and a linear read-out fed back as the next input.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub start: Param<T>,
    pub gru: GruStack<T>,
    pub out: Linear<T>,
}

struct RolloutCache<T> {
    steps: Vec<StackCache<T>>,
    h_tops: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
}

fn step_mask<T: Real>(lens: &[usize], t: usize) -> Option<Vec<T>> {
    if lens.iter().all(|&l| t < l) {
        None
    } else {
        Some(lens.iter().map(|&l| if t < l { T::one() } else { T::zero() }).collect())
    }
}

impl<T: Real> Decoder<T> {
    fn new(frame_dim: usize, seq_dim: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            start: Param::zeros(&[frame_dim]),
            gru: GruStack::new(frame_dim, seq_dim, layers, rng),
            out: Linear::new(seq_dim, frame_dim, rng),
        }
    }

    fn rollout(&self, y: &[T], batch: usize, lens: &[usize]) -> RolloutCache<T> {
        let steps_n = lens.iter().copied().max().unwrap_or(0);
        let mut hs = vec![y.to_vec(); self.gru.num_layers()];
        let mut x: Vec<T> = (0..batch).flat_map(|_| self.start.value.iter().copied()).collect();
        let mut cache = RolloutCache {
            steps: Vec::with_capacity(steps_n),
            h_tops: Vec::with_capacity(steps_n),
            outputs: Vec::with_capacity(steps_n),
        };
        for t in 0..steps_n {
            let mask = step_mask::<T>(lens, t);
            let (new_hs, sc) = self.gru.step(&x, &hs, batch, mask.as_deref());
            hs = new_hs;
            let top = hs[hs.len() - 1].clone();
            let o = self.out.forward(&top, batch);
            x = o.clone();
            cache.steps.push(sc);
            cache.h_tops.push(top);
            cache.outputs.push(o);
        }
        cache
    }

    /// Backward through a rollout given `dL/d output_t`; returns `dL/dy`.
    fn backward(&mut self, cache: &RolloutCache<T>, mut d_out: Vec<Vec<T>>, batch: usize) -> Vec<T> {
        let hd = self.gru.hidden();
        let nl = self.gru.num_layers();
        let mut dh = vec![vec![T::zero(); batch * hd]; nl];
        let mut dx_next: Option<Vec<T>> = None;
        for t in (0..cache.steps.len()).rev() {
            let mut d_o = std::mem::take(&mut d_out[t]);
            if let Some(dx) = &dx_next {
                for (a, b) in d_o.iter_mut().zip(dx) {
                    *a += *b;
                }
            }
            let d_top = self.out.backward(&cache.h_tops[t], &d_o, batch);
            for (a, b) in dh[nl - 1].iter_mut().zip(&d_top) {
                *a += *b;
            }
            let (dx, dh_prev) = self.gru.backward_step(&cache.steps[t], dh, batch);
            dh = dh_prev;
            dx_next = Some(dx);
        }
        if let Some(dx) = dx_next {
            let d = self.start.len();
            for row in dx.chunks(d) {
                for (g, v) in self.start.grad.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        let mut dy = vec![T::zero(); batch * hd];
        for l in dh {
            for (a, b) in dy.iter_mut().zip(&l) {
                *a += *b;
            }
        }
        dy
    }
}

impl<T: Real> Parameterized<T> for Decoder<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = vec![("start".to_string(), &self.start)];
        v.extend(self.gru.named_params().into_iter().map(|(n, p)| (format!("gru.{n}"), p)));
        v.extend(self.out.named_params().into_iter().map(|(n, p)| (format!("out.{n}"), p)));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.start];
        v.extend(self.gru.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// One training example as frame-feature steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqItem<T> {
    pub input: Vec<Vec<T>>,
    pub recon_target: Vec<Vec<T>>,
    pub pred_target: Vec<Vec<T>>,
}

impl SeqItem<f32> {
    pub fn from_pair(pair: TrainingPair) -> Self {
        Self {
            input: pair.input_steps,
            recon_target: pair.recon_target,
            pred_target: pair.pred_target,
        }
    }
}

/// Local-aggregation inputs of a batch: a constant unit-feature bank and,
/// per item, the sorted `C ∪ B` and `B` index sets into it.
#[derive(Debug, Clone)]
pub struct LaBatch<'a> {
    pub bank: &'a [Vec<f64>],
    pub sets: Vec<(Vec<usize>, Vec<usize>)>,
    pub ratio: f64,
    pub tau: f64,
}

/// Gradients w.r.t. an item's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads<T> {
    pub input: Vec<Vec<T>>,
    pub recon_target: Vec<Vec<T>>,
    pub pred_target: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct SeqBatchLoss<T> {
    pub recon: f64,
    pub pred: f64,
    pub la: f64,
    pub total: f64,
    pub step_grads: Option<Vec<StepGrads<T>>>,
}

struct EncodeCache<T> {
    steps: Vec<StackCache<T>>,
    h_top: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqCodec<T = f32> {
    pub frame_dim: usize,
    pub seq_dim: usize,
    pub encoder: GruStack<T>,
    pub proj: Linear<T>,
    pub recon: Decoder<T>,
    pub pred: Decoder<T>,
    pub flags: SeqFlags,
    pub epoch: usize,
    pub history: Vec<SeqEpochLoss>,
}

/// Streaming encoder state for step-at-a-time feeding.
#[derive(Debug, Clone)]
pub struct EncoderState<T> {
    hs: Vec<Vec<T>>,
    steps: usize,
}

/// Per-item mean squared error averaged over the batch, with the gradient
/// w.r.t. the outputs laid out per step.
fn head_loss<T: Real>(outputs: &[Vec<T>], targets: &[&[Vec<T>]], d: usize) -> (f64, Vec<Vec<T>>) {
    let batch = targets.len();
    let mut grads: Vec<Vec<T>> = outputs.iter().map(|o| vec![T::zero(); o.len()]).collect();
    let mut total = 0.0;
    for (b, tg) in targets.iter().enumerate() {
        let denom = (tg.len() * d) as f64;
        let scale = T::lit(2.0 / (denom * batch as f64));
        let mut sum = 0.0;
        for (t, z) in tg.iter().enumerate() {
            let o = &outputs[t][b * d..(b + 1) * d];
            for j in 0..d {
                let e = o[j] - z[j];
                sum += e.to_f64().unwrap_or(f64::NAN).powi(2);
                grads[t][b * d + j] = scale * e;
            }
        }
        total += sum / denom;
    }
    (total / batch as f64, grads)
}

impl<T: Real> SeqCodec<T> {
    pub fn new(frame_dim: usize, seq_dim: usize, layers: usize, flags: SeqFlags, seed: u64) -> Result<Self> {
        if frame_dim == 0 || seq_dim == 0 || layers == 0 {
            return Err(Error::config("sequence codec dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            frame_dim,
            seq_dim,
            encoder: GruStack::new(frame_dim, seq_dim, layers, &mut rng),
            proj: Linear::new(seq_dim, seq_dim, &mut rng),
            recon: Decoder::new(frame_dim, seq_dim, layers, &mut rng),
            pred: Decoder::new(frame_dim, seq_dim, layers, &mut rng),
            flags,
            epoch: 0,
            history: Vec::new(),
        })
    }

    fn check_steps(&self, steps: &[Vec<T>]) -> Result<()> {
        if steps.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if let Some(s) = steps.iter().find(|s| s.len() != self.frame_dim) {
            return Err(Error::shape(format!("step width {} but model expects {}", s.len(), self.frame_dim)));
        }
        Ok(())
    }

    fn encode_batch(&self, inputs: &[&[Vec<T>]]) -> (Vec<T>, EncodeCache<T>) {
        let batch = inputs.len();
        let d = self.frame_dim;
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let steps_n = lens.iter().copied().max().unwrap_or(0);
        let mut hs = vec![vec![T::zero(); batch * self.seq_dim]; self.encoder.num_layers()];
        let mut steps = Vec::with_capacity(steps_n);
        for t in 0..steps_n {
            let mut x = vec![T::zero(); batch * d];
            for (b, s) in inputs.iter().enumerate() {
                if let Some(z) = s.get(t) {
                    x[b * d..(b + 1) * d].copy_from_slice(z);
                }
            }
            let mask = step_mask::<T>(&lens, t);
            let (new_hs, sc) = self.encoder.step(&x, &hs, batch, mask.as_deref());
            hs = new_hs;
            steps.push(sc);
        }
        let h_top = hs.pop().expect("at least one layer");
        let y = self.proj.forward(&h_top, batch);
        (y, EncodeCache { steps, h_top })
    }

    /// Backward through the encoder; returns `dL/dx_t` per step when asked.
    fn encode_backward(&mut self, cache: &EncodeCache<T>, dy: &[T], batch: usize, need_dx: bool) -> Vec<Vec<T>> {
        let nl = self.encoder.num_layers();
        let mut dh = vec![vec![T::zero(); batch * self.seq_dim]; nl];
        dh[nl - 1] = self.proj.backward(&cache.h_top, dy, batch);
        let mut dxs = vec![Vec::new(); cache.steps.len()];
        for t in (0..cache.steps.len()).rev() {
            let (dx, dh_prev) = self.encoder.backward_step(&cache.steps[t], dh, batch);
            dh = dh_prev;
            if need_dx {
                dxs[t] = dx;
            }
        }
        dxs
    }

    /// Sequence feature of one series of frame features.
    pub fn encode_sequence(&self, steps: &[Vec<T>]) -> Result<Vec<T>> {
        self.check_steps(steps)?;
        Ok(self.encode_batch(&[steps]).0)
    }

    /// Sequence features of many series, batched in fixed chunks.
    pub fn encode_many(&self, seqs: &[&[Vec<T>]]) -> Result<Vec<Vec<T>>> {
        for s in seqs {
            self.check_steps(s)?;
        }
        let chunks: Vec<Vec<Vec<T>>> = seqs
            .par_chunks(ENCODE_CHUNK)
            .map(|c| {
                let (y, _) = self.encode_batch(c);
                y.chunks(self.seq_dim).map(<[T]>::to_vec).collect()
            })
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn start_encoding(&self) -> EncoderState<T> {
        EncoderState {
            hs: vec![vec![T::zero(); self.seq_dim]; self.encoder.num_layers()],
            steps: 0,
        }
    }

    pub fn feed(&self, state: &mut EncoderState<T>, step: &[T]) -> Result<()> {
        if step.len() != self.frame_dim {
            return Err(Error::shape(format!("step width {} but model expects {}", step.len(), self.frame_dim)));
        }
        state.hs = self.encoder.step(step, &state.hs, 1, None).0;
        state.steps += 1;
        Ok(())
    }

    pub fn finish(&self, state: &EncoderState<T>) -> Result<Vec<T>> {
        if state.steps == 0 {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        Ok(self.proj.forward(&state.hs[state.hs.len() - 1], 1))
    }

    /// Autoregressive rollouts of both heads from `y`.
    pub fn run_decoders(&self, y: &[T], recon_len: usize, pred_len: usize) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
        if y.len() != self.seq_dim {
            return Err(Error::shape(format!("feature width {} but model expects {}", y.len(), self.seq_dim)));
        }
        if !self.flags.use_reconstruction && recon_len > 0 {
            return Err(Error::invalid("reconstruction head is disabled"));
        }
        if !self.flags.use_prediction && pred_len > 0 {
            return Err(Error::invalid("prediction head is disabled"));
        }
        let roll = |dec: &Decoder<T>, n: usize| dec.rollout(y, 1, &[n]).outputs;
        Ok((roll(&self.recon, recon_len), roll(&self.pred, pred_len)))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Parameters that receive gradient under the current flags.
    pub fn active_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.proj.params_mut());
        if self.flags.use_reconstruction {
            v.extend(self.recon.params_mut());
        }
        if self.flags.use_prediction {
            v.extend(self.pred.params_mut());
        }
        v
    }

    /// Mean head losses plus `la.ratio` × mean `L^la` over the batch;
    /// accumulates parameter gradients.
    pub fn loss_and_backward(&mut self, items: &[SeqItem<T>], la: Option<&LaBatch<'_>>, need_step_grads: bool) -> Result<SeqBatchLoss<T>> {
        let batch = items.len();
        if batch == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let d = self.frame_dim;
        for it in items {
            self.check_steps(&it.input)?;
            for (on, tg) in [
                (self.flags.use_reconstruction, &it.recon_target),
                (self.flags.use_prediction, &it.pred_target),
            ] {
                if on && (tg.is_empty() || tg.iter().any(|z| z.len() != d)) {
                    return Err(Error::shape("decoder targets must be non-empty with frame width"));
                }
            }
        }
        if let Some(l) = la {
            if l.sets.len() != batch {
                return Err(Error::shape("one neighbour set pair per item is required"));
            }
        }
        let inputs: Vec<&[Vec<T>]> = items.iter().map(|it| it.input.as_slice()).collect();
        let (y, enc) = self.encode_batch(&inputs);
        let mut dy = vec![T::zero(); batch * self.seq_dim];
        let mut grads: Vec<StepGrads<T>> = items
            .iter()
            .map(|_| StepGrads {
                input: Vec::new(),
                recon_target: Vec::new(),
                pred_target: Vec::new(),
            })
            .collect();
        let mut losses = [0.0; 2];
        for head in 0..2 {
            let on = if head == 0 { self.flags.use_reconstruction } else { self.flags.use_prediction };
            if !on {
                continue;
            }
            let targets: Vec<&[Vec<T>]> = items
                .iter()
                .map(|it| if head == 0 { it.recon_target.as_slice() } else { it.pred_target.as_slice() })
                .collect();
            let lens: Vec<usize> = targets.iter().map(|t| t.len()).collect();
            let dec = if head == 0 { &mut self.recon } else { &mut self.pred };
            let cache = dec.rollout(&y, batch, &lens);
            let (loss, d_out) = head_loss(&cache.outputs, &targets, d);
            losses[head] = loss;
            if need_step_grads {
                for (b, g) in grads.iter_mut().enumerate() {
                    let tg: Vec<Vec<T>> = (0..lens[b]).map(|t| d_out[t][b * d..(b + 1) * d].iter().map(|&v| -v).collect()).collect();
                    if head == 0 {
                        g.recon_target = tg;
                    } else {
                        g.pred_target = tg;
                    }
                }
            }
            let dyh = dec.backward(&cache, d_out, batch);
            for (a, b) in dy.iter_mut().zip(&dyh) {
                *a += *b;
            }
        }
        let mut la_loss = 0.0;
        if let Some(l) = la {
            let scale = l.ratio / batch as f64;
            for (b, (members, background)) in l.sets.iter().enumerate() {
                let yb: Vec<f64> = y[b * self.seq_dim..(b + 1) * self.seq_dim]
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect();
                let norm = yb.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let q: Vec<f64> = yb.iter().map(|v| v / norm).collect();
                let (loss, dq) = la_loss_and_grad(&q, l.bank, members, background, l.tau);
                la_loss += loss / batch as f64;
                let qd = dot(&q, &dq);
                for j in 0..self.seq_dim {
                    dy[b * self.seq_dim + j] += T::lit(scale * (dq[j] - q[j] * qd) / norm);
                }
            }
        }
        let dxs = self.encode_backward(&enc, &dy, batch, need_step_grads);
        if need_step_grads {
            for (b, g) in grads.iter_mut().enumerate() {
                g.input = (0..items[b].input.len()).map(|t| dxs[t][b * d..(b + 1) * d].to_vec()).collect();
            }
        }
        let ratio = la.map_or(0.0, |l| l.ratio);
        Ok(SeqBatchLoss {
            recon: losses[0],
            pred: losses[1],
            la: la_loss,
            total: losses[0] + losses[1] + ratio * la_loss,
            step_grads: need_step_grads.then_some(grads),
        })
    }
}

const ENCODE_CHUNK: usize = 64;
pub const SEQ_CHECKPOINT_KIND: &str = "sequence_codec";

impl<T: Real> Parameterized<T> for SeqCodec<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        [
            ("encoder", self.encoder.named_params()),
            ("proj", self.proj.named_params()),
            ("recon", self.recon.named_params()),
            ("pred", self.pred.named_params()),
        ]
        .into_iter()
        .flat_map(|(prefix, ps)| ps.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p)))
        .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.proj.params_mut());
        v.extend(self.recon.params_mut());
        v.extend(self.pred.params_mut());
        v
    }
}

impl SeqCodec<f32> {
    pub fn to_checkpoint(&self, cfg: &SeqCodecConfig) -> Result<Checkpoint> {
        let params = self
            .named_params()
            .into_iter()
            .map(|(n, p)| Ok((n, Tensor::new(p.shape.clone(), p.value.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            metadata: serde_json::json!({
                "kind": SEQ_CHECKPOINT_KIND,
                "frame_dim": self.frame_dim,
                "seq_dim": self.seq_dim,
                "layers": self.encoder.num_layers(),
                "flags": self.flags,
                "epoch": self.epoch,
                "history": self.history,
                "config": cfg,
            }),
            params,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, SeqCodecConfig)> {
        let meta = &ck.metadata;
        if meta["kind"] != SEQ_CHECKPOINT_KIND {
            return Err(Error::config(format!("checkpoint kind {} is not a sequence codec", meta["kind"])));
        }
        let get = |k: &str| -> Result<serde_json::Value> {
            meta.get(k).cloned().ok_or_else(|| Error::config(format!("sequence checkpoint lacks {k}")))
        };
        let frame_dim: usize = serde_json::from_value(get("frame_dim")?)?;
        let seq_dim: usize = serde_json::from_value(get("seq_dim")?)?;
        let layers: usize = serde_json::from_value(get("layers")?)?;
        let flags: SeqFlags = serde_json::from_value(get("flags")?)?;
        let cfg: SeqCodecConfig = serde_json::from_value(get("config")?)?;
        let mut model = Self::new(frame_dim, seq_dim, layers, flags, 0)?;
        model.epoch = serde_json::from_value(get("epoch")?)?;
        model.history = serde_json::from_value(get("history")?)?;
        load_params(&mut model, ck)?;
        Ok((model, cfg))
    }

    /// Encodes every sequence through its encoder view.
    pub fn encode_features(&self, features: &[Vec<Vec<f32>>], mode: PairMode, stride: usize) -> Result<Vec<Vec<f32>>> {
        let views: Vec<Vec<Vec<f32>>> = features
            .iter()
            .map(|s| encoder_view(s.len(), mode, stride).into_iter().map(|i| s[i].clone()).collect())
            .collect();
        let refs: Vec<&[Vec<f32>]> = views.iter().map(Vec::as_slice).collect();
        self.encode_many(&refs)
    }
}

pub fn unit_rows(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| normalize(&r.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
        .collect()
}

/// Shuffled batches of similar length: a random order is cut into windows
/// of eight batches, each window sorted by length and split.
pub fn bucketed_batches(ids: &[usize], lens: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = ids.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for window in order.chunks(batch * 8) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| lens[i]);
        batches.extend(w.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn check_features(features: &[Vec<Vec<f32>>]) -> Result<usize> {
    let d = features
        .iter()
        .flatten()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("no frame features to train on"))?;
    for (i, s) in features.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::invalid(format!("sequence {i} has no frames")));
        }
        if s.iter().any(|z| z.len() != d || z.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("sequence {i} has malformed frame features")));
        }
    }
    Ok(d)
}

/// Builds a fresh model and trains it for `cfg.epochs`.
pub fn train_sequence_model(features: &[Vec<Vec<f32>>], cfg: &SeqCodecConfig) -> Result<SeqCodec<f32>> {
    cfg.validate()?;
    let d = check_features(features)?;
    let mut model = SeqCodec::new(d, cfg.seq_dim, cfg.layers, cfg.flags(), cfg.seed)?;
    continue_sequence_training(&mut model, features, cfg, cfg.epochs, cfg.lr)?;
    Ok(model)
}

/// Neighbour sets from the model's current features; `None` when local
/// aggregation is off.
pub fn e_step(model: &SeqCodec<f32>, features: &[Vec<Vec<f32>>], cfg: &SeqCodecConfig) -> Result<Option<(Vec<Vec<f64>>, NeighborSets)>> {
    if cfg.la_ratio == 0.0 {
        return Ok(None);
    }
    let y = model.encode_features(features, cfg.pair_mode, cfg.stride)?;
    let unit = unit_rows(&y);
    let sets = build_neighbor_sets(&unit, cfg.k_bg, &cfg.cluster_counts, cfg.seed ^ model.epoch as u64, cfg.neighbor_merge)?;
    Ok(Some((unit, sets)))
}

/// Runs `epochs` more epochs of the EM schedule at learning rate `lr`.
pub fn continue_sequence_training(
    model: &mut SeqCodec<f32>,
    features: &[Vec<Vec<f32>>],
    cfg: &SeqCodecConfig,
    epochs: usize,
    lr: f64,
) -> Result<()> {
    cfg.validate()?;
    let d = check_features(features)?;
    if d != model.frame_dim {
        return Err(Error::shape(format!("features have width {d}, model expects {}", model.frame_dim)));
    }
    let n = features.len();
    if cfg.la_ratio > 0.0 {
        if n <= cfg.k_bg {
            return Err(Error::invalid(format!(
                "local aggregation needs more than k_bg = {} sequences, got {n}",
                cfg.k_bg
            )));
        }
        if let Some(&c) = cfg.cluster_counts.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!("cluster count {c} must be below the {n} sequences")));
        }
    }
    let items: Vec<Option<SeqItem<f32>>> = features
        .iter()
        .map(|s| make_training_pairs(s, cfg.pair_mode, cfg.stride, cfg.reverse_order).ok().map(SeqItem::from_pair))
        .collect();
    let eligible: Vec<usize> = (0..n).filter(|&i| items[i].is_some()).collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!(
            "no sequence has the {} steps needed for a training pair",
            2 * cfg.stride
        )));
    }
    let lens: Vec<usize> = features.iter().map(Vec::len).collect();
    let mut adam = Adam::new(lr, cfg.weight_decay);
    for _ in 0..epochs {
        let neighbors = e_step(model, features, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E9_0000 ^ model.epoch as u64);
        let mut acc = SeqEpochLoss::default();
        let mut seen = 0usize;
        for ids in bucketed_batches(&eligible, &lens, cfg.batch_size, &mut rng) {
            let batch: Vec<SeqItem<f32>> = ids.iter().map(|&i| items[i].clone().expect("eligible")).collect();
            let la = neighbors.as_ref().map(|(bank, sets)| LaBatch {
                bank,
                sets: ids.iter().map(|&i| (sets.members(i), sets.background[i].clone())).collect(),
                ratio: cfg.la_ratio,
                tau: cfg.temperature,
            });
            model.zero_grad();
            let loss = model.loss_and_backward(&batch, la.as_ref(), false)?;
            if !loss.total.is_finite() {
                return Err(Error::invalid(format!("sequence loss diverged at epoch {}", model.epoch)));
            }
            let mut params = model.active_params_mut();
            clip_grad_norm(&mut params, cfg.grad_clip);
            adam.step(params);
            let w = ids.len() as f64;
            acc.recon += loss.recon * w;
            acc.pred += loss.pred * w;
            acc.la += loss.la * w;
            acc.total += loss.total * w;
            seen += ids.len();
        }
        let s = seen as f64;
        model.history.push(SeqEpochLoss {
            recon: acc.recon / s,
            pred: acc.pred / s,
            la: acc.la / s,
            total: acc.total / s,
        });
        model.epoch += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{assert_close, numeric_grad};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn interleaved_and_split_indices() {
        let p = pair_indices(8, PairMode::Interleaved, 1, false).unwrap();
        assert_eq!(p.input, vec![0, 2, 4, 6]);
        assert_eq!(p.pred, vec![1, 3, 5, 7]);
        let s = pair_indices(8, PairMode::Split, 1, true).unwrap();
        assert_eq!(s.input, vec![0, 1, 2, 3]);
        assert_eq!(s.pred, vec![4, 5, 6, 7]);
        assert_eq!(s.recon, vec![3, 2, 1, 0]);
        let odd = pair_indices(7, PairMode::Interleaved, 2, false).unwrap();
        assert_eq!((odd.input, odd.pred), (vec![0, 4], vec![2, 6]));
        assert!(pair_indices(3, PairMode::Interleaved, 2, false).is_err());
        assert_eq!(encoder_view(1, PairMode::Interleaved, 1), vec![0]);
    }

    #[test]
    fn rp_loss_cases() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let off: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 1.0).collect()).collect();
        assert_eq!(rp_loss(&a, &a, &a, &a).unwrap(), 0.0);
        assert_eq!(rp_loss(&off, &a, &a, &a).unwrap(), 1.0);
        assert_eq!(rp_loss(&off, &a, &[], &[]).unwrap(), 1.0);
        assert!(rp_loss(&a, &a[..1], &[], &[]).is_err());
    }

    #[test]
    fn softmax_hand_case_and_limits() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = neighbor_probability(&f[0], &[0], &f, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p - e / (e + 1.0)).abs() < 1e-12);
        assert!((neighbor_probability(&f[0], &[0, 1], &f, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((neighbor_probability(&f[0], &[1], &f, 1e6).unwrap() - 0.5).abs() < 1e-3);
        assert!(neighbor_probability(&f[0], &[1], &f, 0.0).is_err());
    }

    #[test]
    fn neighbour_sets_small_cases() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        let s = build_neighbor_sets(&pts, 1, &[3 - 1], 0, NeighborMerge::Union).unwrap();
        assert_eq!(s.background[1], vec![0]);
        assert!(build_neighbor_sets(&pts, 3, &[2], 0, NeighborMerge::Union).is_err());
        assert!(build_neighbor_sets(&pts, 1, &[3], 0, NeighborMerge::Union).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud: Vec<Vec<f64>> = (0..12).map(|_| randn(&mut rng, 3)).collect();
        let single = build_neighbor_sets(&cloud, 2, &[11], 0, NeighborMerge::Intersection).unwrap();
        // 11 clusters over 12 points leave at most one pair together.
        assert!(single.close.iter().filter(|c| c.len() > 1).count() <= 2);
        let u = build_neighbor_sets(&cloud, 2, &[2, 3], 0, NeighborMerge::Union).unwrap();
        let x = build_neighbor_sets(&cloud, 2, &[2, 3], 0, NeighborMerge::Intersection).unwrap();
        for i in 0..12 {
            assert!(x.close[i].iter().all(|j| u.close[i].contains(j)));
            assert!(x.close[i].contains(&i));
        }
    }

    #[test]
    fn la_loss_is_zero_when_close_within_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<Vec<f64>> = (0..6).map(|_| normalize(&randn(&mut rng, 4))).collect();
        let sets = NeighborSets {
            background: vec![vec![1, 2, 3]; 6],
            close: vec![vec![2, 3]; 6],
        };
        assert!(local_aggregation_loss(0, &f, &sets, 0.07).unwrap().abs() < 1e-12);
        let wider = NeighborSets {
            background: vec![vec![1]; 6],
            close: vec![vec![0, 5]; 6],
        };
        // B ⊆ C ∪ B, so the ratio is at least 1 and the loss never positive.
        assert!(local_aggregation_loss(0, &f, &wider, 0.5).unwrap() < 0.0);
    }

    fn tiny_items(rng: &mut ChaCha8Rng, d: usize) -> Vec<SeqItem<f64>> {
        [5usize, 3, 4]
            .iter()
            .map(|&n| {
                let steps: Vec<Vec<f64>> = (0..2 * n).map(|_| randn(rng, d)).collect();
                let p = pair_indices(steps.len(), PairMode::Interleaved, 1, true).unwrap();
                let g = |idx: &[usize]| idx.iter().map(|&i| steps[i].clone()).collect();
                SeqItem {
                    input: g(&p.input),
                    recon_target: g(&p.recon),
                    pred_target: g(&p.pred),
                }
            })
            .collect()
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let (d, ds) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model: SeqCodec<f64> = SeqCodec::new(d, ds, 2, SeqFlags::default(), 5).unwrap();
        for p in model.params_mut() {
            for v in p.value.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let items = tiny_items(&mut rng, d);
        let bank: Vec<Vec<f64>> = (0..6).map(|_| normalize(&randn(&mut rng, ds))).collect();
        let la = LaBatch {
            bank: &bank,
            sets: vec![(vec![0, 1, 4], vec![1, 4]), (vec![2, 3, 5], vec![3]), (vec![0, 1, 2, 3], vec![0, 2])],
            ratio: 0.7,
            tau: 0.5,
        };
        model.zero_grad();
        let out = model.loss_and_backward(&items, Some(&la), true).unwrap();
        let analytic: Vec<f64> = model.named_params().iter().flat_map(|(_, p)| p.grad.clone()).collect();
        let mut flat: Vec<f64> = model.named_params().iter().flat_map(|(_, p)| p.value.clone()).collect();
        let numeric = numeric_grad(&mut flat, |x| {
            let mut m = model.clone();
            let mut off = 0;
            for p in m.params_mut() {
                let n = p.len();
                p.value.copy_from_slice(&x[off..off + n]);
                off += n;
            }
            m.loss_and_backward(&items, Some(&la), false).unwrap().total
        });
        assert_close(&analytic, &numeric, 1e-4);

        // Gradient w.r.t. the input and target steps of the second item.
        let grads = out.step_grads.unwrap();
        let it = &items[1];
        let mut x: Vec<f64> = it.input.iter().chain(&it.recon_target).chain(&it.pred_target).flatten().copied().collect();
        let (ni, nr) = (it.input.len() * d, it.recon_target.len() * d);
        let numeric = numeric_grad(&mut x, |x| {
            let mut batch = items.clone();
            let rows = |s: &[f64]| s.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
            batch[1].input = rows(&x[..ni]);
            batch[1].recon_target = rows(&x[ni..ni + nr]);
            batch[1].pred_target = rows(&x[ni + nr..]);
            model.clone().loss_and_backward(&batch, Some(&la), false).unwrap().total
        });
        let g = &grads[1];
        let analytic: Vec<f64> = g.input.iter().chain(&g.recon_target).chain(&g.pred_target).flatten().copied().collect();
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn la_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank: Vec<Vec<f64>> = (0..5).map(|_| normalize(&randn(&mut rng, 3))).collect();
        let (members, background) = (vec![0, 1, 2, 4], vec![1, 4]);
        let mut y = randn(&mut rng, 3);
        let f = |y: &[f64]| la_loss_and_grad(&normalize(y), &bank, &members, &background, 0.3).0;
        let q = normalize(&y);
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (_, dq) = la_loss_and_grad(&q, &bank, &members, &background, 0.3);
        let qd = dot(&q, &dq);
        let analytic: Vec<f64> = (0..3).map(|j| (dq[j] - q[j] * qd) / n).collect();
        let numeric = numeric_grad(&mut y, f);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn streaming_matches_batched_encoding() {
        let model: SeqCodec<f32> = SeqCodec::new(5, 8, 2, SeqFlags::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<Vec<Vec<f32>>> = [1usize, 7, 100]
            .iter()
            .map(|&n| (0..n).map(|_| randn(&mut rng, 5).into_iter().map(|v| v as f32).collect()).collect())
            .collect();
        let refs: Vec<&[Vec<f32>]> = seqs.iter().map(Vec::as_slice).collect();
        let batched = model.encode_many(&refs).unwrap();
        for (s, yb) in seqs.iter().zip(&batched) {
            let mut st = model.start_encoding();
            for z in s {
                model.feed(&mut st, z).unwrap();
            }
            let ys = model.finish(&st).unwrap();
            assert_eq!(ys.len(), 8);
            for (a, b) in ys.iter().zip(yb) {
                assert!((a - b).abs() < 1e-6);
            }
            assert_eq!(model.encode_sequence(s).unwrap(), model.encode_sequence(s).unwrap());
        }
        assert!(model.encode_sequence(&[]).is_err());
    }

    #[test]
    fn decoders_respect_flags() {
        let flags = SeqFlags {
            use_prediction: false,
            ..SeqFlags::default()
        };
        let model: SeqCodec<f32> = SeqCodec::new(3, 4, 1, flags, 0).unwrap();
        let y = vec![0.1, -0.2, 0.3, 0.0];
        let (r, p) = model.run_decoders(&y, 5, 0).unwrap();
        assert_eq!((r.len(), p.len()), (5, 0));
        assert!(r.iter().all(|s| s.len() == 3));
        assert_eq!(model.run_decoders(&y, 5, 0).unwrap().0, r);
        assert!(model.run_decoders(&y, 1, 2).is_err());
    }

    #[test]
    fn training_reduces_loss_and_checkpoints_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Two families of smooth trajectories in a 4-d feature space.
        let features: Vec<Vec<Vec<f32>>> = (0..24)
            .map(|i| {
                let len = rng.gen_range(8..16);
                let phase: f64 = rng.gen_range(0.0..1.0);
                (0..len)
                    .map(|t| {
                        let s = t as f64 * 0.3 + phase;
                        let v = if i % 2 == 0 { [s.sin(), s.cos(), 0.5, 0.0] } else { [0.0, 0.3, s.cos(), -s.sin()] };
                        v.iter().map(|&x| x as f32).collect()
                    })
                    .collect()
            })
            .collect();
        let cfg = SeqCodecConfig {
            seq_dim: 16,
            batch_size: 8,
            epochs: 15,
            k_bg: 5,
            cluster_counts: vec![2, 4],
            la_ratio: 0.01,
            lr: 5e-3,
            ..SeqCodecConfig::default()
        };
        let model = train_sequence_model(&features, &cfg).unwrap();
        let h = &model.history;
        assert_eq!(h.len(), 15);
        assert!(h[h.len() - 1].recon + h[h.len() - 1].pred < h[0].recon + h[0].pred, "{h:?}");
        let ck = model.to_checkpoint(&cfg).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), std::path::Path::new("x")).unwrap();
        let (m2, c2) = SeqCodec::from_checkpoint(&back).unwrap();
        assert_eq!(c2, cfg);
        let a = model.encode_features(&features, cfg.pair_mode, cfg.stride).unwrap();
        let b = m2.encode_features(&features, cfg.pair_mode, cfg.stride).unwrap();
        assert_eq!(a, b);
        // k_bg must be below N.
        let too_few = SeqCodecConfig { k_bg: 30, ..cfg };
        assert!(train_sequence_model(&features, &too_few).is_err());
    }
}
