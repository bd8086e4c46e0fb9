//! End-to-end orchestration: data, frame training, augmentation, sequence
//! training, optional joint fine-tuning, clustering and evaluation, with
//! artifacts persisted to a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_cluster, BaselineConfig};
use crate::clustering::{silhouette_from_distances, silhouette_score, select_num_clusters, to_f64_rows, KMeansConfig};
use crate::data::{parse_dataset, read_labels, Dataset, Sequence};
use crate::error::{Error, Result};
use crate::evaluation::{
    augment_dataset, compute_grading, derived_sequences, score_clustering, true_positive_rate, ClusterSummary,
    GradingVector, RuleConfig, SiblingGroup,
};
use crate::frame_codec::{
    continue_training, encode_source, train_frame_model, FrameCodec, FrameCodecConfig, FrameEpochLoss, FrameSource,
    LazyRender,
};
use crate::nn::{clip_grad_norm, Adam, Param, Parameterized};
use crate::plots;
use crate::render::{FrameImage, RasterConfig};
use crate::sequence_codec::{
    average_pool, continue_sequence_training, e_step, make_training_pairs, train_sequence_model, LaBatch, SeqCodec,
    SeqCodecConfig, SeqEpochLoss, SeqItem,
};
use crate::synth::{generate_dataset, ScenarioTemplate};
use crate::tensor_io::{write_dsc1, Checkpoint, Tensor};

pub const STAGE_DATA: &str = "data";
pub const STAGE_FRAME: &str = "frame_training";
pub const STAGE_SEQUENCE: &str = "sequence_training";
pub const STAGE_JOINT: &str = "joint_finetune";
pub const STAGE_EVALUATION: &str = "evaluation";
pub const STAGE_ARTIFACTS: &str = "artifacts";

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const FRAME_MODEL_FILE: &str = "frame_model.ckpt";
pub const SEQ_MODEL_FILE: &str = "seq_model.ckpt";
pub const FRAME_FEATURES_FILE: &str = "frame_features.dsc1";
pub const SEQ_FEATURES_FILE: &str = "seq_features.dsc1";
pub const CLUSTERS_FILE: &str = "clusters.json";

/// The five method variants compared against the full model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_prediction: bool,
    pub no_reconstruction: bool,
    pub no_triplet: bool,
    pub no_reverse_order: bool,
    /// Sequence feature = mean of frame features; no sequence model.
    pub sequence_average: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 5] = [
        "no_prediction",
        "no_reconstruction",
        "no_triplet",
        "no_reverse_order",
        "sequence_average",
    ];

    /// Flags with exactly the named ablation set; `"full"` sets none.
    pub fn named(name: &str) -> Result<Self> {
        let mut f = Self::default();
        match name {
            "full" => {}
            "no_prediction" => f.no_prediction = true,
            "no_reconstruction" => f.no_reconstruction = true,
            "no_triplet" => f.no_triplet = true,
            "no_reverse_order" => f.no_reverse_order = true,
            "sequence_average" => f.sequence_average = true,
            other => return Err(Error::config(format!("unknown ablation {other:?}"))),
        }
        Ok(f)
    }

    pub fn name(&self) -> String {
        let on: Vec<&str> = [
            (self.no_prediction, "no_prediction"),
            (self.no_reconstruction, "no_reconstruction"),
            (self.no_triplet, "no_triplet"),
            (self.no_reverse_order, "no_reverse_order"),
            (self.sequence_average, "sequence_average"),
        ]
        .iter()
        .filter(|(b, _)| *b)
        .map(|(_, n)| *n)
        .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub templates: Vec<ScenarioTemplate>,
    pub count_per_template: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            templates: ScenarioTemplate::all(),
            count_per_template: 20,
            seed: 7,
        }
    }
}

/// Where sequences come from: a data directory when `dir` is set,
/// otherwise the synthetic generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_derived: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans: KMeansConfig,
    pub rules: RuleConfig,
    /// Number of derived sequences in the baseline comparison subset.
    pub baseline_subset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_derived: 5,
            k_min: 2,
            k_max: 10,
            kmeans: KMeansConfig::default(),
            rules: RuleConfig::default(),
            baseline_subset: 40,
        }
    }
}

/// Stage 3: sequence loss back-propagated into the frame encoder,
/// alternated with frame-objective epochs, at a reduced learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub epochs: usize,
    pub lr_scale: f64,
    /// Derived sequences per joint step.
    pub batch_size: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr_scale: 0.1,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub raster: RasterConfig,
    pub frame: FrameCodecConfig,
    pub sequence: SeqCodecConfig,
    pub joint: JointConfig,
    pub evaluation: EvalConfig,
    pub baseline: BaselineConfig,
    pub ablation: AblationFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PipelineConfig {
    /// Settings sized for a CPU run on the 120-sequence synthetic set.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            // Half the pixels over half the extent keeps the full-scale
            // metres per pixel, so vehicles stay several pixels wide.
            raster: RasterConfig {
                pixels: 65,
                extent: 50.0,
                ..RasterConfig::default()
            },
            frame: FrameCodecConfig {
                epochs: 30,
                anchors_per_sequence: 4,
                ..FrameCodecConfig::default()
            },
            sequence: SeqCodecConfig::default(),
            joint: JointConfig::default(),
            evaluation: EvalConfig::default(),
            baseline: BaselineConfig::default(),
            ablation: AblationFlags::default(),
        }
    }

    /// Full-scale hyperparameters (129-pixel rasters, larger batch sizes
    /// and epoch counts).
    pub fn full_scale() -> Self {
        Self {
            raster: RasterConfig::default(),
            frame: FrameCodecConfig::full_scale(),
            sequence: SeqCodecConfig::full_scale(),
            joint: JointConfig {
                epochs: 20,
                ..JointConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.raster.validate()?;
        self.effective_frame().validate()?;
        let a = &self.ablation;
        if a.sequence_average && (a.no_prediction || a.no_reconstruction || a.no_reverse_order) {
            return Err(Error::config(
                "sequence_average trains no sequence model; it cannot be combined with sequence-model ablations",
            ));
        }
        if !a.sequence_average {
            self.effective_sequence().validate()?;
        }
        let e = &self.evaluation;
        if e.n_derived < 2 {
            return Err(Error::config("evaluation needs n_derived ≥ 2 siblings per sequence"));
        }
        if e.k_min < 2 || e.k_min > e.k_max {
            return Err(Error::config(format!("cluster range [{}, {}] is invalid", e.k_min, e.k_max)));
        }
        if !(self.joint.lr_scale > 0.0) || self.joint.batch_size == 0 {
            return Err(Error::config("joint fine-tuning needs lr_scale > 0 and batch_size ≥ 1"));
        }
        if self.data.dir.is_none() && self.data.synth.count_per_template == 0 {
            return Err(Error::config("count per template must be at least 1"));
        }
        Ok(())
    }

    /// Frame settings with the ablations and master seed applied.
    pub fn effective_frame(&self) -> FrameCodecConfig {
        let mut f = self.frame.clone();
        if self.ablation.no_triplet {
            f.omega = 0.0;
        }
        f.seed = mix(self.seed, 1) ^ f.seed;
        f
    }

    /// Sequence settings with the ablations and master seed applied.
    pub fn effective_sequence(&self) -> SeqCodecConfig {
        let mut s = self.sequence.clone();
        s.use_prediction &= !self.ablation.no_prediction;
        s.use_reconstruction &= !self.ablation.no_reconstruction;
        s.reverse_order &= !self.ablation.no_reverse_order;
        s.seed = mix(self.seed, 2) ^ s.seed;
        s
    }

    pub fn augment_seed(&self) -> u64 {
        mix(self.seed, 3)
    }

    pub fn cluster_seed(&self) -> u64 {
        mix(self.seed, 4)
    }

    fn joint_seed(&self) -> u64 {
        mix(self.seed, 5)
    }
}

/// A data set plus template labels when they are known.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub truth: Option<BTreeMap<String, String>>,
}

pub fn load_data(cfg: &DataConfig) -> Result<LoadedData> {
    match &cfg.dir {
        Some(dir) => {
            let dataset = parse_dataset(dir)?;
            dataset.validate()?;
            Ok(LoadedData {
                dataset,
                truth: read_labels(dir)?,
            })
        }
        None => {
            let ld = generate_dataset(&cfg.synth.templates, cfg.synth.count_per_template, cfg.synth.seed)?;
            Ok(LoadedData {
                dataset: ld.dataset,
                truth: Some(ld.labels),
            })
        }
    }
}

/// Trained models: the sequence model is absent under average pooling.
#[derive(Debug, Clone)]
pub struct Models {
    pub frame: FrameCodec<f32>,
    pub sequence: Option<SeqCodec<f32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub frame_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_first: Option<FrameEpochLoss>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_last: Option<FrameEpochLoss>,
    pub sequence_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence_first: Option<SeqEpochLoss>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence_last: Option<SeqEpochLoss>,
}

impl TrainingSummary {
    fn of(models: &Models) -> Self {
        let f = &models.frame.history;
        let s = models.sequence.as_ref().map(|m| m.history.as_slice()).unwrap_or(&[]);
        Self {
            frame_epochs: f.len(),
            frame_first: f.first().cloned(),
            frame_last: f.last().cloned(),
            sequence_epochs: s.len(),
            sequence_first: s.first().cloned(),
            sequence_last: s.last().cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub tp: f64,
    pub fp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    pub k: usize,
    pub silhouette: f64,
    pub silhouette_table: Vec<(usize, f64)>,
    pub n_sequences: usize,
    pub n_derived: usize,
    pub per_cluster: Vec<ClusterSummary>,
    pub training: TrainingSummary,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineMeta>,
}

/// Baseline-only report fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMeta {
    pub clusterer: String,
    pub explained_ratio: Vec<f64>,
    /// TP of the learned clustering restricted to the same derived subset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learned_tp_on_subset: Option<f64>,
}

/// Everything an evaluation produced, for artifacts and plots.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub report: EvaluationReport,
    pub frame_features: Vec<Vec<Vec<f32>>>,
    pub groups: Vec<SiblingGroup>,
    pub derived_ids: Vec<String>,
    pub seq_features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub gradings: BTreeMap<String, GradingVector>,
}

/// Frame features of each derived sequence, in sibling order.
pub fn derived_features(frame_features: &[Vec<Vec<f32>>], groups: &[SiblingGroup]) -> Vec<Vec<Vec<f32>>> {
    groups
        .iter()
        .zip(frame_features)
        .flat_map(|(g, f)| g.subsets.iter().map(move |idx| idx.iter().map(|&k| f[k].clone()).collect()))
        .collect()
}

fn sequence_features(models: &Models, derived: &[Vec<Vec<f32>>], cfg: &PipelineConfig) -> Result<Vec<Vec<f32>>> {
    match &models.sequence {
        Some(m) => {
            let s = cfg.effective_sequence();
            m.encode_features(derived, s.pair_mode, s.stride)
        }
        None => average_pool(derived),
    }
}

/// Renders, augments, encodes, clusters and scores a data set with
/// trained models.
pub fn evaluate_models(data: &LoadedData, models: &Models, cfg: &PipelineConfig) -> Result<Evaluated> {
    let ds = &data.dataset;
    let source = LazyRender {
        dataset: ds,
        raster: &cfg.raster,
    };
    let frame_features = encode_source(&models.frame, &source)?;
    let groups = augment_dataset(ds, cfg.evaluation.n_derived, cfg.augment_seed())?;
    let derived = derived_features(&frame_features, &groups);
    let derived_ids: Vec<String> = groups.iter().flat_map(|g| g.derived_ids.iter().cloned()).collect();
    let seq_features = sequence_features(models, &derived, cfg)?;
    let points = to_f64_rows(&seq_features);
    let e = &cfg.evaluation;
    let k_max = e.k_max.min(points.len().saturating_sub(1));
    let sel = select_num_clusters(&points, e.k_min, k_max, cfg.cluster_seed(), &e.kmeans)?;
    let labels = sel.assignment.labels.clone();
    let label_map: BTreeMap<String, usize> = derived_ids.iter().cloned().zip(labels.iter().copied()).collect();

    let derived_seqs: Vec<(Sequence, &str)> = ds
        .sequences
        .iter()
        .zip(&groups)
        .flat_map(|(s, g)| derived_sequences(s, g).into_iter().map(move |d| (d, s.map_ref.as_str())))
        .collect();
    let gradings: BTreeMap<String, GradingVector> = derived_seqs
        .par_iter()
        .map(|(d, map_ref)| {
            let map = ds.maps.get(*map_ref).ok_or_else(|| Error::Reference {
                sequence: d.id.clone(),
                map_ref: map_ref.to_string(),
            })?;
            Ok((d.id.clone(), compute_grading(d, map, &e.rules)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    let truth: Option<BTreeMap<String, String>> = data.truth.as_ref().map(|t| {
        groups
            .iter()
            .filter_map(|g| t.get(&g.origin).map(|name| (g, name)))
            .flat_map(|(g, name)| g.derived_ids.iter().map(move |id| (id.clone(), name.clone())))
            .collect()
    });
    let scores = score_clustering(&groups, &label_map, &gradings, truth.as_ref())?;
    let silhouette = sel.table.iter().find(|(k, _)| *k == sel.k).map_or(0.0, |r| r.1);
    let report = EvaluationReport {
        method: cfg.ablation.name(),
        tp: scores.tp,
        fp: scores.fp,
        purity: scores.purity,
        k: sel.k,
        silhouette,
        silhouette_table: sel.table,
        n_sequences: ds.len(),
        n_derived: derived_ids.len(),
        per_cluster: scores.per_cluster,
        training: TrainingSummary::of(models),
        config: serde_json::to_value(cfg)?,
        baseline: None,
    };
    Ok(Evaluated {
        report,
        frame_features,
        groups,
        derived_ids,
        seq_features,
        labels,
        gradings,
    })
}

/// Frames of derived sequences, addressed through their origin.
struct DerivedFrames<'a> {
    source: &'a LazyRender<'a>,
    /// `(origin index, frame indices)` per derived sequence.
    index: Vec<(usize, &'a [usize])>,
}

/// Stage 3: each step encodes the frames of a few derived sequences with
/// the frame encoder, applies the sequence loss, and back-propagates into
/// both models. Each epoch is followed by one frame-objective epoch.
pub fn joint_finetune(models: &mut Models, data: &LoadedData, groups: &[SiblingGroup], cfg: &PipelineConfig) -> Result<()> {
    let Some(seq) = models.sequence.as_mut() else {
        return Ok(());
    };
    let frame = &mut models.frame;
    let fcfg = cfg.effective_frame();
    let scfg = cfg.effective_sequence();
    let source = LazyRender {
        dataset: &data.dataset,
        raster: &cfg.raster,
    };
    let derived = DerivedFrames {
        source: &source,
        index: groups
            .iter()
            .enumerate()
            .flat_map(|(o, g)| g.subsets.iter().map(move |s| (o, s.as_slice())))
            .collect(),
    };
    let pairs: Vec<(usize, crate::sequence_codec::PairIndices)> = derived
        .index
        .iter()
        .enumerate()
        .filter_map(|(i, (_, idx))| {
            crate::sequence_codec::pair_indices(idx.len(), scfg.pair_mode, scfg.stride, scfg.reverse_order)
                .ok()
                .map(|p| (i, p))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no derived sequence is long enough for joint fine-tuning"));
    }
    let lr_f = fcfg.lr * cfg.joint.lr_scale;
    let lr_s = scfg.lr * cfg.joint.lr_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.joint_seed());
    let mut opt_f = Adam::new(lr_f, 0.0);
    let mut opt_s = Adam::new(lr_s, scfg.weight_decay);
    for _ in 0..cfg.joint.epochs {
        let all_features = {
            let ff = encode_source(frame, &source)?;
            derived_features(&ff, groups)
        };
        let neighbors = e_step(seq, &all_features, &scfg)?;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = SeqEpochLoss::default();
        for chunk in order.chunks(cfg.joint.batch_size) {
            // Every frame any item touches, encoded once.
            let mut frames: Vec<(usize, usize)> = Vec::new();
            let mut slot: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for &c in chunk {
                let (di, p) = &pairs[c];
                let (o, idx) = derived.index[*di];
                for &t in p.input.iter().chain(&p.recon).chain(&p.pred) {
                    let key = (o, idx[t]);
                    if !slot.contains_key(&key) {
                        slot.insert(key, frames.len());
                        frames.push(key);
                    }
                }
            }
            let images: Vec<FrameImage> = frames.par_iter().map(|&(o, k)| derived.source.frame(o, k)).collect();
            let x: Vec<f32> = images.iter().flat_map(|im| im.as_slice().iter().copied()).collect();
            let (mu, _, cache) = frame.encode_forward(&x, images.len())?;
            let d = frame.latent_dim;
            let row = |s: usize| mu[s * d..(s + 1) * d].to_vec();
            let items: Vec<SeqItem<f32>> = chunk
                .iter()
                .map(|&c| {
                    let (di, p) = &pairs[c];
                    let (o, idx) = derived.index[*di];
                    let g = |ts: &[usize]| ts.iter().map(|&t| row(slot[&(o, idx[t])])).collect();
                    SeqItem {
                        input: g(&p.input),
                        recon_target: g(&p.recon),
                        pred_target: g(&p.pred),
                    }
                })
                .collect();
            let la = neighbors.as_ref().map(|(bank, sets)| LaBatch {
                bank,
                sets: chunk
                    .iter()
                    .map(|&c| {
                        let i = pairs[c].0;
                        (sets.members(i), sets.background[i].clone())
                    })
                    .collect(),
                ratio: scfg.la_ratio,
                tau: scfg.temperature,
            });
            seq.zero_grad();
            frame.zero_grad();
            let out = seq.loss_and_backward(&items, la.as_ref(), true)?;
            if !out.total.is_finite() {
                return Err(Error::invalid("joint fine-tuning diverged"));
            }
            let mut dmu = vec![0.0f32; mu.len()];
            for (&c, g) in chunk.iter().zip(out.step_grads.as_deref().unwrap_or(&[])) {
                let (di, p) = &pairs[c];
                let (o, idx) = derived.index[*di];
                // Targets are constants: letting the loss reach them lets
                // the encoder shrink its own outputs.
                for (&t, gv) in p.input.iter().zip(&g.input) {
                    let s = slot[&(o, idx[t])];
                    for (a, b) in dmu[s * d..(s + 1) * d].iter_mut().zip(gv) {
                        *a += *b;
                    }
                }
            }
            frame.encode_backward(cache, &dmu, None, false);
            let mut sp = seq.active_params_mut();
            clip_grad_norm(&mut sp, scfg.grad_clip);
            opt_s.step(sp);
            let mut fp: Vec<&mut Param<f32>> = frame.encoder_params_mut();
            clip_grad_norm(&mut fp, scfg.grad_clip);
            opt_f.step(fp);
            let w = chunk.len() as f64;
            acc.recon += out.recon * w;
            acc.pred += out.pred * w;
            acc.la += out.la * w;
            acc.total += out.total * w;
        }
        let n = pairs.len() as f64;
        seq.history.push(SeqEpochLoss {
            recon: acc.recon / n,
            pred: acc.pred / n,
            la: acc.la / n,
            total: acc.total / n,
        });
        seq.epoch += 1;
        continue_training(frame, &source, &fcfg, 1, lr_f)?;
    }
    Ok(())
}

/// Stages 1–3 on a loaded data set.
pub fn train_models(data: &LoadedData, cfg: &PipelineConfig, run_dir: Option<&Path>) -> Result<Models> {
    let fcfg = cfg.effective_frame();
    let source = LazyRender {
        dataset: &data.dataset,
        raster: &cfg.raster,
    };
    let frame = train_frame_model(&source, &fcfg).map_err(|e| e.in_stage(STAGE_FRAME))?;
    if let Some(dir) = run_dir {
        frame.to_checkpoint(&fcfg)?.save(dir.join(FRAME_MODEL_FILE)).map_err(|e| e.in_stage(STAGE_ARTIFACTS))?;
    }
    let mut models = Models { frame, sequence: None };
    if cfg.ablation.sequence_average {
        return Ok(models);
    }
    let scfg = cfg.effective_sequence();
    let groups = augment_dataset(&data.dataset, cfg.evaluation.n_derived, cfg.augment_seed())
        .map_err(|e| e.in_stage(STAGE_SEQUENCE))?;
    let features = encode_source(&models.frame, &source).map_err(|e| e.in_stage(STAGE_SEQUENCE))?;
    let derived = derived_features(&features, &groups);
    let seq = train_sequence_model(&derived, &scfg).map_err(|e| e.in_stage(STAGE_SEQUENCE))?;
    if let Some(dir) = run_dir {
        seq.to_checkpoint(&scfg)?.save(dir.join(SEQ_MODEL_FILE)).map_err(|e| e.in_stage(STAGE_ARTIFACTS))?;
    }
    models.sequence = Some(seq);
    if cfg.joint.epochs > 0 {
        joint_finetune(&mut models, data, &groups, cfg).map_err(|e| e.in_stage(STAGE_JOINT))?;
        if let Some(dir) = run_dir {
            let save = |models: &Models| -> Result<()> {
                models.frame.to_checkpoint(&fcfg)?.save(dir.join(FRAME_MODEL_FILE))?;
                if let Some(s) = &models.sequence {
                    s.to_checkpoint(&scfg)?.save(dir.join(SEQ_MODEL_FILE))?;
                }
                Ok(())
            };
            save(&models).map_err(|e| e.in_stage(STAGE_ARTIFACTS))?;
        }
    }
    Ok(models)
}

/// Continues sequence training of an existing model on derived features.
pub fn retrain_sequence(model: &mut SeqCodec<f32>, derived: &[Vec<Vec<f32>>], cfg: &PipelineConfig, epochs: usize) -> Result<()> {
    let s = cfg.effective_sequence();
    continue_sequence_training(model, derived, &s, epochs, s.lr)
}

/// Output of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub models: Models,
    pub evaluated: Evaluated,
}

/// Runs every stage; writes artifacts when `run_dir` is given.
pub fn run_pipeline(cfg: &PipelineConfig, run_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    }
    let data = load_data(&cfg.data).map_err(|e| e.in_stage(STAGE_DATA))?;
    run_on_data(&data, cfg, run_dir)
}

pub fn run_on_data(data: &LoadedData, cfg: &PipelineConfig, run_dir: Option<&Path>) -> Result<RunOutput> {
    let models = train_models(data, cfg, run_dir)?;
    let evaluated = evaluate_models(data, &models, cfg).map_err(|e| e.in_stage(STAGE_EVALUATION))?;
    if let Some(dir) = run_dir {
        write_artifacts(dir, data, &evaluated).map_err(|e| e.in_stage(STAGE_ARTIFACTS))?;
    }
    Ok(RunOutput { models, evaluated })
}

/// Id manifest stored next to a feature file: `x.dsc1` → `x.ids.json`.
pub fn manifest_path(features: &Path) -> PathBuf {
    features.with_extension("ids.json")
}

pub fn write_manifest(features: &Path, ids: &[String]) -> Result<()> {
    fs::write(manifest_path(features), serde_json::to_string_pretty(ids)? + "\n")?;
    Ok(())
}

pub fn read_manifest(features: &Path) -> Result<Vec<String>> {
    let path = manifest_path(features);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn report_json(report: &EvaluationReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Report, feature tensors, labels, gradings, siblings and plots.
pub fn write_artifacts(dir: &Path, data: &LoadedData, ev: &Evaluated) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), report_json(&ev.report)?)?;
    let frames = ev.frame_features.iter().map(|f| Tensor::from_rows(f)).collect::<Result<Vec<_>>>()?;
    write_dsc1(dir.join(FRAME_FEATURES_FILE), &frames)?;
    write_dsc1(dir.join(SEQ_FEATURES_FILE), &[Tensor::from_rows(&ev.seq_features)?])?;
    let seq_ids: Vec<String> = data.dataset.sequences.iter().map(|s| s.id.clone()).collect();
    write_manifest(&dir.join(FRAME_FEATURES_FILE), &seq_ids)?;
    write_manifest(&dir.join(SEQ_FEATURES_FILE), &ev.derived_ids)?;
    let labels: BTreeMap<&str, usize> = ev.derived_ids.iter().map(String::as_str).zip(ev.labels.iter().copied()).collect();
    fs::write(dir.join(CLUSTERS_FILE), serde_json::to_string_pretty(&labels)?)?;
    fs::write(dir.join("gradings.json"), serde_json::to_string_pretty(&ev.gradings)?)?;
    fs::write(dir.join("siblings.json"), serde_json::to_string_pretty(&ev.groups)?)?;
    plots::emit_plots(&dir.join("plots"), &ev.seq_features, &ev.labels, &probe_frames(data, ev))?;
    Ok(())
}

/// First sequence of each template (or the first three sequences) with its
/// frame features, for frame-similarity plots.
fn probe_frames<'a>(data: &'a LoadedData, ev: &'a Evaluated) -> Vec<(&'a str, &'a [Vec<f32>])> {
    let seqs = &data.dataset.sequences;
    let picks: Vec<usize> = match &data.truth {
        Some(t) => {
            let mut seen = std::collections::BTreeSet::new();
            (0..seqs.len()).filter(|&i| t.get(&seqs[i].id).is_some_and(|n| seen.insert(n.clone()))).collect()
        }
        None => (0..seqs.len().min(3)).collect(),
    };
    picks.into_iter().map(|i| (seqs[i].id.as_str(), ev.frame_features[i].as_slice())).collect()
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub tp: f64,
    pub fp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    pub k: usize,
}

impl AblationRow {
    fn of(r: &EvaluationReport) -> Self {
        Self {
            method: r.method.clone(),
            tp: r.tp,
            fp: r.fp,
            purity: r.purity,
            k: r.k,
        }
    }
}

/// Markdown table of ablation rows.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| method | TP | FP | purity | k |\n|---|---|---|---|---|\n");
    for r in rows {
        let purity = r.purity.map_or("-".to_string(), |p| format!("{p:.4}"));
        s.push_str(&format!("| {} | {:.4} | {:.4} | {} | {} |\n", r.method, r.tp, r.fp, purity, r.k));
    }
    s
}

/// Runs the full method and each named ablation on the same data and
/// seeds. Frame models are shared between variants whose frame settings
/// agree.
pub fn run_ablations(base: &PipelineConfig, names: &[&str], run_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data = load_data(&base.data).map_err(|e| e.in_stage(STAGE_DATA))?;
    run_ablations_on(&data, base, names, run_dir, None)
}

/// [`run_ablations`] on loaded data. A finished full run, when given,
/// supplies the "full" row and its frame model.
pub fn run_ablations_on(
    data: &LoadedData,
    base: &PipelineConfig,
    names: &[&str],
    run_dir: Option<&Path>,
    full: Option<&RunOutput>,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let variant = |name: &str| -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            ablation: AblationFlags::named(name)?,
            ..base.clone()
        })
    };
    let mut frames: Vec<(FrameCodecConfig, FrameCodec<f32>)> = Vec::new();
    if let Some(out) = full {
        frames.push((variant("full")?.effective_frame(), out.models.frame.clone()));
    }
    let mut rows = Vec::new();
    for name in std::iter::once("full").chain(names.iter().copied()) {
        let cfg = variant(name)?;
        cfg.validate()?;
        let report = match full {
            Some(out) if name == "full" => out.evaluated.report.clone(),
            _ => {
                let fcfg = cfg.effective_frame();
                let frame = match frames.iter().find(|(c, _)| *c == fcfg) {
                    Some((_, m)) => m.clone(),
                    None => {
                        let source = LazyRender {
                            dataset: &data.dataset,
                            raster: &cfg.raster,
                        };
                        let m = train_frame_model(&source, &fcfg).map_err(|e| e.in_stage(STAGE_FRAME))?;
                        frames.push((fcfg.clone(), m.clone()));
                        m
                    }
                };
                let models = train_after_frame(data, &cfg, frame)?;
                evaluate_models(data, &models, &cfg).map_err(|e| e.in_stage(STAGE_EVALUATION))?.report
            }
        };
        if let Some(dir) = run_dir {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            fs::write(sub.join(CONFIG_FILE), cfg.to_toml_string()?)?;
            fs::write(sub.join(REPORT_FILE), report_json(&report)?)?;
        }
        rows.push(AblationRow::of(&report));
    }
    if let Some(dir) = run_dir {
        fs::write(dir.join("ablations.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        fs::write(dir.join("ablations.md"), ablation_markdown(&rows))?;
    }
    Ok(rows)
}

/// Stages 2–3 given a trained frame model.
fn train_after_frame(data: &LoadedData, cfg: &PipelineConfig, frame: FrameCodec<f32>) -> Result<Models> {
    let mut models = Models { frame, sequence: None };
    if cfg.ablation.sequence_average {
        return Ok(models);
    }
    let source = LazyRender {
        dataset: &data.dataset,
        raster: &cfg.raster,
    };
    let groups = augment_dataset(&data.dataset, cfg.evaluation.n_derived, cfg.augment_seed())?;
    let features = encode_source(&models.frame, &source)?;
    let derived = derived_features(&features, &groups);
    models.sequence = Some(train_sequence_model(&derived, &cfg.effective_sequence()).map_err(|e| e.in_stage(STAGE_SEQUENCE))?);
    if cfg.joint.epochs > 0 {
        joint_finetune(&mut models, data, &groups, cfg).map_err(|e| e.in_stage(STAGE_JOINT))?;
    }
    Ok(models)
}

/// Originals for a subset of `n_derived_total` derived sequences, taken
/// round-robin across templates when labels are known.
pub fn baseline_subset(data: &LoadedData, n_derived_total: usize, n_derived: usize) -> Vec<usize> {
    let n_orig = n_derived_total.div_ceil(n_derived).min(data.dataset.len());
    let seqs = &data.dataset.sequences;
    match &data.truth {
        Some(t) => {
            let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in seqs.iter().enumerate() {
                by_label.entry(t.get(&s.id).map_or("", String::as_str)).or_default().push(i);
            }
            let lists: Vec<Vec<usize>> = by_label.into_values().collect();
            let mut out = Vec::new();
            let mut r = 0;
            while out.len() < n_orig {
                for l in &lists {
                    if let Some(&i) = l.get(r) {
                        if out.len() < n_orig {
                            out.push(i);
                        }
                    }
                }
                r += 1;
            }
            out.sort_unstable();
            out
        }
        None => (0..n_orig).collect(),
    }
}

/// Baseline on a subset of the derived set, scored like the learned
/// pipeline. `learned` adds the learned clustering's TP on that subset.
pub fn run_baseline(data: &LoadedData, cfg: &PipelineConfig, subset_derived: usize, learned: Option<&Evaluated>) -> Result<EvaluationReport> {
    let n_derived = cfg.evaluation.n_derived;
    let all_groups = augment_dataset(&data.dataset, n_derived, cfg.augment_seed())?;
    let picks = if subset_derived == 0 {
        (0..data.dataset.len()).collect()
    } else {
        baseline_subset(data, subset_derived, n_derived)
    };
    let groups: Vec<SiblingGroup> = picks.iter().map(|&i| all_groups[i].clone()).collect();
    let derived: Vec<(Sequence, &str)> = picks
        .iter()
        .zip(&groups)
        .flat_map(|(&i, g)| {
            let s = &data.dataset.sequences[i];
            derived_sequences(s, g).into_iter().map(move |d| (d, s.map_ref.as_str()))
        })
        .collect();
    let refs: Vec<&Sequence> = derived.iter().map(|(d, _)| d).collect();
    let res = baseline_cluster(&refs, &cfg.baseline)?;
    let ids: Vec<String> = refs.iter().map(|s| s.id.clone()).collect();
    let labels: BTreeMap<String, usize> = ids.iter().cloned().zip(res.labels.iter().copied()).collect();
    let mut gradings = BTreeMap::new();
    for (d, map_ref) in &derived {
        let map = data.dataset.maps.get(*map_ref).ok_or_else(|| Error::Reference {
            sequence: d.id.clone(),
            map_ref: map_ref.to_string(),
        })?;
        gradings.insert(d.id.clone(), compute_grading(d, map, &cfg.evaluation.rules));
    }
    let truth: Option<BTreeMap<String, String>> = data.truth.as_ref().map(|t| {
        groups
            .iter()
            .filter_map(|g| t.get(&g.origin).map(|n| (g, n)))
            .flat_map(|(g, n)| g.derived_ids.iter().map(move |id| (id.clone(), n.clone())))
            .collect()
    });
    let scores = score_clustering(&groups, &labels, &gradings, truth.as_ref())?;
    let learned_tp_on_subset = learned
        .map(|ev| {
            let all: BTreeMap<&str, usize> = ev.derived_ids.iter().map(String::as_str).zip(ev.labels.iter().copied()).collect();
            let sub: BTreeMap<String, usize> = ids
                .iter()
                .map(|id| {
                    all.get(id.as_str())
                        .map(|&l| (id.clone(), l))
                        .ok_or_else(|| Error::invalid(format!("learned run lacks {id}")))
                })
                .collect::<Result<_>>()?;
            true_positive_rate(&groups, &sub)
        })
        .transpose()?;
    let silhouette = match res.silhouette_table.iter().find(|(k, _)| *k == res.k) {
        Some(&(_, v)) => v,
        None if res.k >= 2 && res.k < ids.len() => silhouette_from_distances(&res.distances, &res.labels)?,
        None => 0.0,
    };
    Ok(EvaluationReport {
        method: "baseline".into(),
        tp: scores.tp,
        fp: scores.fp,
        purity: scores.purity,
        k: res.k,
        silhouette,
        silhouette_table: res.silhouette_table,
        n_sequences: picks.len(),
        n_derived: ids.len(),
        per_cluster: scores.per_cluster,
        training: TrainingSummary::default(),
        config: serde_json::to_value(&cfg.baseline)?,
        baseline: Some(BaselineMeta {
            clusterer: "k-medoids (PAM) on DTW distances".into(),
            explained_ratio: res.explained_ratio,
            learned_tp_on_subset,
        }),
    })
}

/// Loads the models a run directory holds.
pub fn load_models(dir: &Path) -> Result<Models> {
    let (frame, _) = FrameCodec::from_checkpoint(&Checkpoint::load(dir.join(FRAME_MODEL_FILE))?)?;
    let seq_path = dir.join(SEQ_MODEL_FILE);
    let sequence = if seq_path.exists() {
        Some(SeqCodec::from_checkpoint(&Checkpoint::load(seq_path)?)?.0)
    } else {
        None
    };
    Ok(Models { frame, sequence })
}

pub fn load_config(dir: &Path) -> Result<PipelineConfig> {
    PipelineConfig::from_toml_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)
}

/// Silhouette of given labels on given features; convenience for reports.
pub fn silhouette_of(features: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    silhouette_score(&to_f64_rows(features), labels)
}

/// Training pair for one derived sequence's features, exposed for tools.
pub fn training_pair(features: &[Vec<f32>], cfg: &PipelineConfig) -> Result<SeqItem<f32>> {
    let s = cfg.effective_sequence();
    make_training_pairs(features, s.pair_mode, s.stride, s.reverse_order).map(SeqItem::from_pair)
}
