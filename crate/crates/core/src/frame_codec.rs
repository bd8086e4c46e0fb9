//! Convolutional variational autoencoder over rendered frames, trained with
//! reconstruction, a temporal contrast triplet loss and a small divergence
//! term.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, Adam, Conv2d, ConvTranspose2d, Linear, Param, Parameterized, Real};
use crate::render::{rasterize_frame, FrameImage, RasterConfig, NUM_LAYERS};
use crate::tensor_io::{Checkpoint, Tensor};

/// Hyperparameters of the frame codec and its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameCodecConfig {
    /// Latent width d_f.
    pub latent_dim: usize,
    /// Output channels of each stride-2 convolution block.
    pub channels: Vec<usize>,
    /// Weight ω of the triplet loss.
    pub omega: f64,
    /// Triplet margin α.
    pub alpha: f64,
    /// Weight of the divergence regularizer; 0 gives a plain autoencoder.
    pub kl_weight: f64,
    /// Anchors per optimizer step (each anchor contributes four images).
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Anchors drawn from every sequence per epoch.
    pub anchors_per_sequence: usize,
    /// Time offset of the positive frame.
    pub near_offset: usize,
    /// Time offset of the same-sequence negative frame.
    pub far_offset: usize,
    pub seed: u64,
}

impl Default for FrameCodecConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            channels: vec![16, 32, 64, 128],
            omega: 1.0,
            alpha: 1.0,
            kl_weight: 1e-4,
            batch_size: 16,
            lr: 1e-3,
            epochs: 20,
            anchors_per_sequence: 2,
            near_offset: 1,
            far_offset: 5,
            seed: 0,
        }
    }
}

impl FrameCodecConfig {
    /// Settings reported for the original large-scale training run.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 400,
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("frame codec needs a positive latent width and channel list"));
        }
        if self.batch_size == 0 || self.anchors_per_sequence == 0 {
            return Err(Error::config("frame codec batch size and anchors per sequence must be positive"));
        }
        if !(self.lr > 0.0) || self.omega < 0.0 || self.alpha < 0.0 || self.kl_weight < 0.0 {
            return Err(Error::config("frame codec lr must be positive and loss weights nonnegative"));
        }
        if self.near_offset == 0 || self.near_offset >= self.far_offset {
            return Err(Error::config("frame codec offsets need 0 < near < far"));
        }
        Ok(())
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEpochLoss {
    pub recon: f64,
    pub triplet: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    /// Mean head only.
    Deterministic,
    /// Mean plus scaled Gaussian noise.
    Sampled,
}

/// Encoder/decoder pair. Spatial sizes shrink by stride-2 3×3 convolutions
/// and the decoder mirrors them exactly, using output padding where the
/// encoder rounded up.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCodec<T = f32> {
    pub pixels: usize,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    enc: Vec<Conv2d<T>>,
    mu: Linear<T>,
    logvar: Linear<T>,
    dec_in: Linear<T>,
    dec: Vec<ConvTranspose2d<T>>,
    sizes: Vec<usize>,
    pub epoch: usize,
    pub history: Vec<FrameEpochLoss>,
}

/// Activations kept by [`FrameCodec::encode_forward`].
pub struct EncodeCache<T> {
    batch: usize,
    acts: Vec<Vec<T>>,
}

/// Activations kept by [`FrameCodec::decode_forward`].
pub struct DecodeCache<T> {
    batch: usize,
    z: Vec<T>,
    acts: Vec<Vec<T>>,
}

impl<T: Real> FrameCodec<T> {
    pub fn new(pixels: usize, latent_dim: usize, channels: &[usize], seed: u64) -> Result<Self> {
        if pixels < 2 {
            return Err(Error::config("frame codec needs at least 2 pixels per side"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![pixels];
        for _ in channels {
            let s = *sizes.last().expect("non-empty");
            sizes.push((s - 1) / 2 + 1);
        }
        let mut chans = vec![NUM_LAYERS];
        chans.extend_from_slice(channels);
        let enc = (0..channels.len())
            .map(|l| Conv2d::new(chans[l], chans[l + 1], 3, 2, 1, &mut rng))
            .collect();
        let last = *sizes.last().expect("non-empty");
        let flat = chans[channels.len()] * last * last;
        let mu = Linear::new(flat, latent_dim, &mut rng);
        let logvar = Linear::new(flat, latent_dim, &mut rng);
        let dec_in = Linear::new(latent_dim, flat, &mut rng);
        let dec = (0..channels.len())
            .rev()
            .map(|l| {
                let op = sizes[l] + 1 - 2 * sizes[l + 1];
                ConvTranspose2d::new(chans[l + 1], chans[l], 3, 2, 1, op, &mut rng)
            })
            .collect();
        Ok(Self {
            pixels,
            latent_dim,
            channels: channels.to_vec(),
            enc,
            mu,
            logvar,
            dec_in,
            dec,
            sizes,
            epoch: 0,
            history: Vec::new(),
        })
    }

    fn image_len(&self) -> usize {
        NUM_LAYERS * self.pixels * self.pixels
    }

    /// `x` is `[batch, 4, P, P]`; returns `(mean, logvar)`, each `[batch, d_f]`.
    pub fn encode_forward(&self, x: &[T], batch: usize) -> Result<(Vec<T>, Vec<T>, EncodeCache<T>)> {
        if x.len() != batch * self.image_len() {
            return Err(Error::shape(format!(
                "expected {batch} images of {}x{p}x{p}, got {} values",
                NUM_LAYERS,
                x.len(),
                p = self.pixels
            )));
        }
        let mut acts = vec![x.to_vec()];
        for (l, conv) in self.enc.iter().enumerate() {
            let s = self.sizes[l];
            let mut y = conv.forward(&acts[l], batch, s, s);
            leaky_relu(&mut y);
            acts.push(y);
        }
        let flat = acts.last().expect("non-empty");
        let mu = self.mu.forward(flat, batch);
        let lv = self.logvar.forward(flat, batch);
        Ok((mu, lv, EncodeCache { batch, acts }))
    }

    /// Accumulates encoder gradients; returns `dL/dx` when `need_dx`.
    pub fn encode_backward(&mut self, cache: EncodeCache<T>, dmu: &[T], dlogvar: Option<&[T]>, need_dx: bool) -> Option<Vec<T>> {
        let batch = cache.batch;
        let mut acts = cache.acts;
        let flat = acts.pop().expect("non-empty");
        let mut g = self.mu.backward(&flat, dmu, batch);
        if let Some(dlv) = dlogvar {
            let g2 = self.logvar.backward(&flat, dlv, batch);
            g.iter_mut().zip(&g2).for_each(|(a, b)| *a += *b);
        }
        let mut out = flat;
        for l in (0..self.enc.len()).rev() {
            leaky_relu_backward(&out, &mut g);
            let input = acts.pop().expect("activation per layer");
            let s = self.sizes[l];
            let need = l > 0 || need_dx;
            match self.enc[l].backward(&input, batch, s, s, &g, need) {
                Some(dx) => g = dx,
                None => return None,
            }
            out = input;
        }
        Some(g)
    }

    /// `z` is `[batch, d_f]`; returns images `[batch, 4, P, P]`.
    pub fn decode_forward(&self, z: &[T], batch: usize) -> Result<(Vec<T>, DecodeCache<T>)> {
        if z.len() != batch * self.latent_dim {
            return Err(Error::shape(format!(
                "expected {batch} latent vectors of width {}, got {} values",
                self.latent_dim,
                z.len()
            )));
        }
        let mut h = self.dec_in.forward(z, batch);
        leaky_relu(&mut h);
        let mut acts = vec![h];
        let n = self.dec.len();
        for (i, deconv) in self.dec.iter().enumerate() {
            let s = self.sizes[n - i];
            let mut y = deconv.forward(&acts[i], batch, s, s);
            if i + 1 < n {
                leaky_relu(&mut y);
            }
            acts.push(y);
        }
        let out = acts.pop().expect("non-empty");
        Ok((
            out,
            DecodeCache {
                batch,
                z: z.to_vec(),
                acts,
            },
        ))
    }

    /// Accumulates decoder gradients and returns `dL/dz`.
    pub fn decode_backward(&mut self, cache: DecodeCache<T>, dout: &[T]) -> Vec<T> {
        let batch = cache.batch;
        let mut acts = cache.acts;
        let n = self.dec.len();
        let mut g = dout.to_vec();
        for i in (0..n).rev() {
            let input = acts.pop().expect("activation per layer");
            let s = self.sizes[n - i];
            g = self.dec[i].backward(&input, batch, s, s, &g, true).expect("dx requested");
            leaky_relu_backward(&input, &mut g);
        }
        self.dec_in.backward(&cache.z, &g, batch)
    }

    fn encoder_params(&mut self) -> Vec<&mut Param<T>> {
        let mut ps: Vec<&mut Param<T>> = self.enc.iter_mut().flat_map(|c| c.params_mut()).collect();
        ps.extend(self.mu.params_mut());
        ps.extend(self.logvar.params_mut());
        ps
    }

    /// Encoder parameters only (the part shared with the sequence stage).
    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.encoder_params()
    }
}

impl<T: Real> Parameterized<T> for FrameCodec<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (l, c) in self.enc.iter().enumerate() {
            out.extend(c.named_params().into_iter().map(|(n, p)| (format!("enc.{l}.{n}"), p)));
        }
        out.extend(self.mu.named_params().into_iter().map(|(n, p)| (format!("mu.{n}"), p)));
        out.extend(self.logvar.named_params().into_iter().map(|(n, p)| (format!("logvar.{n}"), p)));
        out.extend(self.dec_in.named_params().into_iter().map(|(n, p)| (format!("dec_in.{n}"), p)));
        for (l, c) in self.dec.iter().enumerate() {
            out.extend(c.named_params().into_iter().map(|(n, p)| (format!("dec.{l}.{n}"), p)));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps: Vec<&mut Param<T>> = self.enc.iter_mut().flat_map(|c| c.params_mut()).collect();
        ps.extend(self.mu.params_mut());
        ps.extend(self.logvar.params_mut());
        ps.extend(self.dec_in.params_mut());
        ps.extend(self.dec.iter_mut().flat_map(|c| c.params_mut()));
        ps
    }
}

impl FrameCodec<f32> {
    fn check_image(&self, img: &FrameImage) -> Result<()> {
        if img.pixels() != self.pixels {
            return Err(Error::shape(format!(
                "image has {} pixels per side, model expects {}",
                img.pixels(),
                self.pixels
            )));
        }
        Ok(())
    }

    /// Encodes one image. Sampled mode draws its noise from `rng`.
    pub fn encode_frame(&self, img: &FrameImage, mode: EncodeMode, rng: &mut impl Rng) -> Result<Vec<f32>> {
        self.check_image(img)?;
        let (mu, lv, _) = self.encode_forward(img.as_slice(), 1)?;
        Ok(match mode {
            EncodeMode::Deterministic => mu,
            EncodeMode::Sampled => mu
                .iter()
                .zip(&lv)
                .map(|(m, l)| m + (l / 2.0).exp() * rng.sample::<f32, _>(StandardNormal))
                .collect(),
        })
    }

    /// Deterministic features for many images, in input order.
    pub fn encode_images(&self, images: &[FrameImage]) -> Result<Vec<Vec<f32>>> {
        for img in images {
            self.check_image(img)?;
        }
        let chunks: Vec<Result<Vec<Vec<f32>>>> = images
            .par_chunks(ENCODE_CHUNK)
            .map(|chunk| {
                let x: Vec<f32> = chunk.iter().flat_map(|i| i.as_slice().iter().copied()).collect();
                let (mu, _, _) = self.encode_forward(&x, chunk.len())?;
                Ok(mu.chunks(self.latent_dim).map(<[f32]>::to_vec).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Decodes one latent vector into a `4×P×P` tensor (no range clamping).
    pub fn decode_frame(&self, z: &[f32]) -> Result<FrameImage> {
        if z.len() != self.latent_dim {
            return Err(Error::shape(format!(
                "latent vector has {} entries, model expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        let (out, _) = self.decode_forward(z, 1)?;
        FrameImage::from_vec(self.pixels, out)
    }

    pub fn to_checkpoint(&self, cfg: &FrameCodecConfig) -> Result<Checkpoint> {
        let params = self
            .named_params()
            .into_iter()
            .map(|(n, p)| Ok((n, Tensor::new(p.shape.clone(), p.value.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            metadata: serde_json::json!({
                "kind": FRAME_CHECKPOINT_KIND,
                "pixels": self.pixels,
                "latent_dim": self.latent_dim,
                "channels": self.channels,
                "epoch": self.epoch,
                "history": self.history,
                "config": cfg,
            }),
            params,
        })
    }

    /// Rebuilds a model from a checkpoint; returns it with the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, FrameCodecConfig)> {
        let meta = &ck.metadata;
        if meta["kind"] != FRAME_CHECKPOINT_KIND {
            return Err(Error::config(format!("checkpoint kind {} is not a frame codec", meta["kind"])));
        }
        let get = |k: &str| -> Result<serde_json::Value> {
            meta.get(k).cloned().ok_or_else(|| Error::config(format!("frame checkpoint lacks {k}")))
        };
        let pixels: usize = serde_json::from_value(get("pixels")?)?;
        let latent: usize = serde_json::from_value(get("latent_dim")?)?;
        let channels: Vec<usize> = serde_json::from_value(get("channels")?)?;
        let cfg: FrameCodecConfig = serde_json::from_value(get("config")?)?;
        let mut model = Self::new(pixels, latent, &channels, 0)?;
        model.epoch = serde_json::from_value(get("epoch")?)?;
        model.history = serde_json::from_value(get("history")?)?;
        load_params(&mut model, ck)?;
        Ok((model, cfg))
    }
}

pub const FRAME_CHECKPOINT_KIND: &str = "frame_codec";
const ENCODE_CHUNK: usize = 64;

/// Copies named checkpoint tensors into a model's parameters.
pub(crate) fn load_params<M: Parameterized<f32>>(model: &mut M, ck: &Checkpoint) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.shape.clone()))
        .collect();
    if names.len() != ck.params.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, model has {}",
            ck.params.len(),
            names.len()
        )));
    }
    for ((name, shape), p) in names.iter().zip(model.params_mut()) {
        let t = ck
            .get(name)
            .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {name}")))?;
        if &t.shape != shape {
            return Err(Error::shape(format!("parameter {name}: shape {:?} vs {:?}", t.shape, shape)));
        }
        p.set_value(t.data.clone());
    }
    Ok(())
}

/// Mean over all elements of the squared difference.
pub fn reconstruction_loss(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(format!("{} vs {} elements", x.len(), x_hat.len())));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = x.iter().zip(x_hat).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(sum / x.len() as f64)
}

/// Images tagged with (sequence, time) plus the anchor groups built from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTripletBatch {
    /// `(sequence index i, time index k)` of each image in the batch.
    pub tags: Vec<(usize, usize)>,
    /// Per anchor the batch rows `[anchor (i,k), near (i,m), far (i,n), cross (j,m)]`.
    pub groups: Vec<[usize; 4]>,
}

impl FrameTripletBatch {
    /// Checks `|k−m| < |k−n|` within a sequence and `j ≠ i` for the cross sample.
    pub fn validate(&self) -> Result<()> {
        for (g, group) in self.groups.iter().enumerate() {
            let tag = |r: usize| {
                self.tags
                    .get(r)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("anchor {g}: row {r} out of range")))
            };
            let (a, near, far, cross) = (tag(group[0])?, tag(group[1])?, tag(group[2])?, tag(group[3])?);
            if near.0 != a.0 || far.0 != a.0 {
                return Err(Error::invalid(format!("anchor {g}: near and far frames must share the anchor's sequence")));
            }
            if a.1.abs_diff(near.1) >= a.1.abs_diff(far.1) {
                return Err(Error::invalid(format!("anchor {g}: near frame is not closer in time than the far frame")));
            }
            if cross.0 == a.0 {
                return Err(Error::invalid(format!("anchor {g}: cross sample comes from the anchor's own sequence")));
            }
        }
        Ok(())
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

/// Mean over anchors of the two hinge terms, with its gradient w.r.t. the
/// feature rows (`features` is `[rows, dim]`).
pub fn triplet_loss_and_grad<T: Real>(features: &[T], dim: usize, groups: &[[usize; 4]], alpha: T) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); features.len()];
    if groups.is_empty() {
        return (T::zero(), grad);
    }
    let row = |r: usize| &features[r * dim..(r + 1) * dim];
    let scale = T::one() / T::from_usize(groups.len()).expect("count");
    let two = T::lit(2.0);
    let mut total = T::zero();
    for &[a, m, n, c] in groups {
        let d_pos = sq_dist(row(a), row(m));
        for neg in [n, c] {
            let h = d_pos - sq_dist(row(a), row(neg)) + alpha;
            if h > T::zero() {
                total += h;
                for d in 0..dim {
                    let (za, zm, zn) = (features[a * dim + d], features[m * dim + d], features[neg * dim + d]);
                    grad[a * dim + d] += two * (zn - zm) * scale;
                    grad[m * dim + d] -= two * (za - zm) * scale;
                    grad[neg * dim + d] += two * (za - zn) * scale;
                }
            }
        }
    }
    (total * scale, grad)
}

/// Triplet loss over a tagged batch; rows of `features` follow `batch.tags`.
pub fn triplet_loss(batch: &FrameTripletBatch, features: &[Vec<f64>], alpha: f64) -> Result<f64> {
    batch.validate()?;
    if features.len() != batch.tags.len() {
        return Err(Error::shape(format!("{} features for {} tags", features.len(), batch.tags.len())));
    }
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("features have different widths"));
    }
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    Ok(triplet_loss_and_grad(&flat, dim, &batch.groups, alpha).0)
}

/// Random access to rendered frames.
pub trait FrameSource: Sync {
    fn num_sequences(&self) -> usize;
    fn sequence_len(&self, seq: usize) -> usize;
    fn pixels(&self) -> usize;
    fn frame(&self, seq: usize, k: usize) -> FrameImage;
}

impl FrameSource for Vec<Vec<FrameImage>> {
    fn num_sequences(&self) -> usize {
        self.len()
    }

    fn sequence_len(&self, seq: usize) -> usize {
        self[seq].len()
    }

    fn pixels(&self) -> usize {
        self.iter().flatten().next().map_or(0, FrameImage::pixels)
    }

    fn frame(&self, seq: usize, k: usize) -> FrameImage {
        self[seq][k].clone()
    }
}

/// Renders frames on demand instead of holding every image in memory.
pub struct LazyRender<'a> {
    pub dataset: &'a Dataset,
    pub raster: &'a RasterConfig,
}

impl FrameSource for LazyRender<'_> {
    fn num_sequences(&self) -> usize {
        self.dataset.len()
    }

    fn sequence_len(&self, seq: usize) -> usize {
        self.dataset.sequences[seq].len()
    }

    fn pixels(&self) -> usize {
        self.raster.pixels
    }

    fn frame(&self, seq: usize, k: usize) -> FrameImage {
        let s = &self.dataset.sequences[seq];
        let map = self.dataset.map_for(s).expect("dataset validated before rendering");
        rasterize_frame(&s.frames[k], map, self.raster)
    }
}

/// Some frame lies at least two steps away, so a strictly farther negative exists.
fn anchor_feasible(k: usize, len: usize) -> bool {
    k.max(len - 1 - k) >= 2
}

/// Picks `(near, far)` time indices for an anchor at `k` in a sequence of
/// `len ≥ 3` frames, honoring `|k−near| < |k−far|`.
fn pick_offsets(k: usize, len: usize, near: usize, far: usize, rng: &mut impl Rng) -> (usize, usize) {
    let pick = |off: usize, rng: &mut dyn rand::RngCore| -> Option<usize> {
        let fwd = (k + off < len).then_some(k + off);
        let back = k.checked_sub(off);
        match (fwd, back) {
            (Some(a), Some(b)) => Some(if rng.gen::<bool>() { a } else { b }),
            (a, b) => a.or(b),
        }
    };
    let m = pick(near.min(len - 1), rng).unwrap_or(if k + 1 < len { k + 1 } else { k - 1 });
    let n = pick(far, rng).unwrap_or(if k >= len - 1 - k { 0 } else { len - 1 });
    if k.abs_diff(m) < k.abs_diff(n) {
        (m, n)
    } else {
        // Short sequence: fall back to the adjacent frame and the farthest end.
        let m = if k + 1 < len { k + 1 } else { k - 1 };
        let n = if k >= len - 1 - k { 0 } else { len - 1 };
        (m, n)
    }
}

/// One optimizer step's images and their triplet structure.
fn build_batch(
    source: &dyn FrameSource,
    anchors: &[(usize, usize)],
    eligible: &[usize],
    cfg: &FrameCodecConfig,
    rng: &mut ChaCha8Rng,
) -> FrameTripletBatch {
    let mut tags = Vec::with_capacity(anchors.len() * 4);
    let mut groups = Vec::with_capacity(anchors.len());
    for &(i, k) in anchors {
        let len = source.sequence_len(i);
        let (m, n) = pick_offsets(k, len, cfg.near_offset, cfg.far_offset, rng);
        let j = loop {
            let j = eligible[rng.gen_range(0..eligible.len())];
            if j != i {
                break j;
            }
        };
        let mj = m.min(source.sequence_len(j) - 1);
        let base = tags.len();
        tags.extend([(i, k), (i, m), (i, n), (j, mj)]);
        groups.push([base, base + 1, base + 2, base + 3]);
    }
    FrameTripletBatch { tags, groups }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub recon: f64,
    pub triplet: f64,
    pub kl: f64,
    pub total: f64,
}

impl<T: Real> FrameCodec<T> {
    /// Forward and backward over a batch of images. `noise` holds one
    /// standard-normal draw per latent entry (all zeros gives the
    /// deterministic path). Gradients are accumulated into the parameters.
    pub fn loss_and_backward(
        &mut self,
        images: &[T],
        noise: &[T],
        groups: &[[usize; 4]],
        cfg: &FrameCodecConfig,
    ) -> Result<BatchLoss> {
        let batch = images.len() / self.image_len();
        let d = self.latent_dim;
        let (mu, lv, enc_cache) = self.encode_forward(images, batch)?;
        if noise.len() != mu.len() {
            return Err(Error::shape("noise must match the latent batch"));
        }
        let half = T::lit(0.5);
        let std: Vec<T> = lv.iter().map(|l| (*l * half).exp()).collect();
        let z: Vec<T> = (0..mu.len()).map(|i| mu[i] + std[i] * noise[i]).collect();
        let (x_hat, dec_cache) = self.decode_forward(&z, batch)?;

        let numel = T::from_usize(images.len()).expect("count");
        let mut recon = T::zero();
        let mut d_out = vec![T::zero(); images.len()];
        for i in 0..images.len() {
            let diff = x_hat[i] - images[i];
            recon += diff * diff;
            d_out[i] = T::lit(2.0) * diff / numel;
        }
        recon /= numel;

        let omega = T::lit(cfg.omega);
        let (trip, trip_grad) = triplet_loss_and_grad(&z, d, groups, T::lit(cfg.alpha));

        let bsz = T::from_usize(batch).expect("count");
        let kl_w = T::lit(cfg.kl_weight);
        let mut kl = T::zero();
        for i in 0..mu.len() {
            kl += -half * (T::one() + lv[i] - mu[i] * mu[i] - lv[i].exp());
        }
        kl /= bsz;

        let mut dz = self.decode_backward(dec_cache, &d_out);
        if cfg.omega > 0.0 {
            dz.iter_mut().zip(&trip_grad).for_each(|(a, g)| *a += omega * *g);
        }
        let mut dmu = vec![T::zero(); mu.len()];
        let mut dlv = vec![T::zero(); mu.len()];
        for i in 0..mu.len() {
            dmu[i] = dz[i] + kl_w * mu[i] / bsz;
            dlv[i] = dz[i] * noise[i] * half * std[i] - kl_w * half * (T::one() - lv[i].exp()) / bsz;
        }
        self.encode_backward(enc_cache, &dmu, Some(&dlv), false);

        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        Ok(BatchLoss {
            recon: f(recon),
            triplet: f(trip),
            kl: f(kl),
            total: f(recon) + cfg.omega * f(trip) + cfg.kl_weight * f(kl),
        })
    }
}

/// Trains a frame codec on every frame the source can render.
pub fn train_frame_model(source: &dyn FrameSource, cfg: &FrameCodecConfig) -> Result<FrameCodec<f32>> {
    cfg.validate()?;
    let eligible: Vec<usize> = (0..source.num_sequences())
        .filter(|&i| source.sequence_len(i) >= 3)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::invalid(
            "triplet negatives unavailable: need at least two sequences with three or more frames",
        ));
    }
    let mut model = FrameCodec::<f32>::new(source.pixels(), cfg.latent_dim, &cfg.channels, cfg.seed)?;
    continue_training(&mut model, source, cfg, cfg.epochs, cfg.lr)?;
    Ok(model)
}

/// Runs `epochs` more epochs of frame training on an existing model.
pub fn continue_training(
    model: &mut FrameCodec<f32>,
    source: &dyn FrameSource,
    cfg: &FrameCodecConfig,
    epochs: usize,
    lr: f64,
) -> Result<()> {
    let eligible: Vec<usize> = (0..source.num_sequences())
        .filter(|&i| source.sequence_len(i) >= 3)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::invalid("triplet negatives unavailable"));
    }
    if source.pixels() != model.pixels {
        return Err(Error::shape("frame source and model disagree on pixel count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF4A3_0000 ^ model.epoch as u64);
    let mut opt = Adam::new(lr, 0.0);
    for _ in 0..epochs {
        let mut anchors: Vec<(usize, usize)> = Vec::new();
        for &i in &eligible {
            for _ in 0..cfg.anchors_per_sequence {
                let len = source.sequence_len(i);
                let k = loop {
                    let k = rng.gen_range(0..len);
                    if anchor_feasible(k, len) {
                        break k;
                    }
                };
                anchors.push((i, k));
            }
        }
        anchors.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for chunk in anchors.chunks(cfg.batch_size) {
            let batch = build_batch(source, chunk, &eligible, cfg, &mut rng);
            let images: Vec<FrameImage> = batch
                .tags
                .par_iter()
                .map(|&(i, k)| source.frame(i, k))
                .collect();
            let x: Vec<f32> = images.iter().flat_map(|im| im.as_slice().iter().copied()).collect();
            let noise: Vec<f32> = (0..images.len() * model.latent_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            model.zero_grad();
            let loss = model.loss_and_backward(&x, &noise, &batch.groups, cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::invalid(format!("frame training diverged at epoch {}", model.epoch)));
            }
            opt.step(model.params_mut());
            sums[0] += loss.recon;
            sums[1] += loss.triplet;
            sums[2] += loss.kl;
            sums[3] += loss.total;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        model.history.push(FrameEpochLoss {
            recon: sums[0] / s,
            triplet: sums[1] / s,
            kl: sums[2] / s,
            total: sums[3] / s,
        });
        model.epoch += 1;
    }
    Ok(())
}

/// Deterministic features for every frame of every sequence the source holds.
pub fn encode_source(model: &FrameCodec<f32>, source: &dyn FrameSource) -> Result<Vec<Vec<Vec<f32>>>> {
    (0..source.num_sequences())
        .map(|i| {
            let images: Vec<FrameImage> = (0..source.sequence_len(i))
                .into_par_iter()
                .map(|k| source.frame(i, k))
                .collect();
            model.encode_images(&images)
        })
        .collect()
}

/// Share of triples `(k, k+near, k+far)` whose features satisfy
/// `‖z_k − z_{k+near}‖ < ‖z_k − z_{k+far}‖`.
pub fn temporal_ordering_fraction(features: &[Vec<Vec<f32>>], near: usize, far: usize) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for seq in features {
        for k in 0..seq.len().saturating_sub(far) {
            total += 1;
            if sq_dist(&seq[k], &seq[k + near]) < sq_dist(&seq[k], &seq[k + far]) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Distinct latent widths present, for sanity checks on feature sets.
pub fn feature_widths(features: &[Vec<Vec<f32>>]) -> BTreeSet<usize> {
    features.iter().flatten().map(Vec::len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::assert_close;

    fn tiny() -> FrameCodec<f64> {
        FrameCodec::new(9, 3, &[2, 3], 5).unwrap()
    }

    #[test]
    fn sizes_mirror_for_odd_and_even_sides() {
        for p in [9, 10, 65, 129] {
            let m = FrameCodec::<f32>::new(p, 4, &[2, 2, 2, 2], 1).unwrap();
            let z = vec![0.0; 4];
            let img = m.decode_frame(&z).unwrap();
            assert_eq!(img.pixels(), p);
            assert!(img.as_slice().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn deterministic_encoding_is_pure() {
        let m = FrameCodec::<f32>::new(9, 4, &[2, 2], 3).unwrap();
        let img = FrameImage::from_vec(9, (0..4 * 81).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = m.encode_frame(&img, EncodeMode::Deterministic, &mut rng).unwrap();
        let b = m.encode_frame(&img, EncodeMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let s = m.encode_frame(&img, EncodeMode::Sampled, &mut rng).unwrap();
        assert_ne!(a, s);
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let m = FrameCodec::<f32>::new(9, 4, &[2, 2], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.encode_frame(&FrameImage::zeros(11), EncodeMode::Deterministic, &mut rng).is_err());
        assert!(m.decode_frame(&[0.0; 3]).is_err());
        assert!(reconstruction_loss(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn reconstruction_loss_examples() {
        assert_eq!(reconstruction_loss(&[0.5; 8], &[0.5; 8]).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[1.0; 8], &[0.0; 8]).unwrap(), 1.0);
    }

    #[test]
    fn triplet_identical_features_give_twice_the_margin() {
        let batch = FrameTripletBatch {
            tags: vec![(0, 3), (0, 4), (0, 8), (1, 4)],
            groups: vec![[0, 1, 2, 3]],
        };
        let feats = vec![vec![0.3, -0.1]; 4];
        assert!((triplet_loss(&batch, &feats, 1.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_constraint_violations_are_errors() {
        let feats = vec![vec![0.0]; 4];
        let same_seq_cross = FrameTripletBatch {
            tags: vec![(0, 3), (0, 4), (0, 8), (0, 4)],
            groups: vec![[0, 1, 2, 3]],
        };
        assert!(triplet_loss(&same_seq_cross, &feats, 1.0).is_err());
        let wrong_order = FrameTripletBatch {
            tags: vec![(0, 3), (0, 8), (0, 4), (1, 4)],
            groups: vec![[0, 1, 2, 3]],
        };
        assert!(triplet_loss(&wrong_order, &feats, 1.0).is_err());
    }

    #[test]
    fn offsets_respect_the_ordering_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for len in 3..20 {
            for k in (0..len).filter(|&k| anchor_feasible(k, len)) {
                let (m, n) = pick_offsets(k, len, 1, 5, &mut rng);
                assert!(m < len && n < len);
                assert!(k.abs_diff(m) < k.abs_diff(n), "len {len} k {k} m {m} n {n}");
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = FrameCodecConfig {
            kl_weight: 0.3,
            alpha: 5.0,
            ..FrameCodecConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = tiny();
        let images: Vec<f64> = (0..4 * 4 * 81).map(|_| rng.gen_range(0.0..1.0)).collect();
        let noise: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let groups = [[0, 1, 2, 3]];
        let mut model = base.clone();
        model.zero_grad();
        model.loss_and_backward(&images, &noise, &groups, &cfg).unwrap();
        let grads: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| p.grad.clone()).collect();
        let np = grads.len();
        let h = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            // Probe a few entries per tensor to keep the test quick.
            for idx in [0, g.len() / 2, g.len() - 1] {
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m.params_mut()[pi].value[idx] += delta;
                    m.loss_and_backward(&images, &noise, &groups, &cfg).unwrap().total
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                assert_close(&[g[idx]], &[num], 1e-4);
            }
        }
        assert_eq!(np, base.named_params().len());
    }

    #[test]
    fn ordering_fraction_counts_strict_wins() {
        let seq: Vec<Vec<f32>> = (0..8).map(|k| vec![k as f32]).collect();
        assert_eq!(temporal_ordering_fraction(&[seq], 1, 5), 1.0);
        let flat = vec![vec![vec![0.0f32]; 8]];
        assert_eq!(temporal_ordering_fraction(&flat, 1, 5), 0.0);
    }
}
