use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use drivecluster::baseline::BaselineConfig;
use drivecluster::clustering::{kmeans, select_num_clusters, silhouette_score, to_f64_rows};
use drivecluster::data::{parse_dataset, write_dataset, write_labels};
use drivecluster::evaluation::augment_all;
use drivecluster::frame_codec::{encode_source, train_frame_model, FrameCodec, LazyRender};
use drivecluster::pipeline::{
    self, derived_features, load_config, load_data, load_models, read_manifest, report_json, run_ablations_on,
    run_baseline, run_pipeline, write_manifest, AblationFlags, DataConfig, LoadedData, PipelineConfig, CLUSTERS_FILE,
    FRAME_FEATURES_FILE, REPORT_FILE, SEQ_FEATURES_FILE,
};
use drivecluster::plots::emit_plots;
use drivecluster::render::{rasterize_frame, RasterConfig};
use drivecluster::sequence_codec::{average_pool, train_sequence_model, SeqCodec};
use drivecluster::synth::{generate_dataset, ScenarioTemplate};
use drivecluster::tensor_io::{read_dsc1, write_dsc1, Checkpoint, Tensor};
use drivecluster::{Error, Result};

/// Root for run directories when `--out` is not given.
const RUN_ROOT_ENV: &str = "DRIVECLUSTER_RUN_ROOT";

#[derive(Parser)]
#[command(name = "drivecluster", version, about = "Unsupervised clustering of driving scenarios")]
struct Cli {
    /// Pipeline configuration (TOML). Command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic data set.
    Synth(SynthArgs),
    /// Rasterize every frame of a data set to DSC1 tensors.
    Render(RenderArgs),
    /// Train the frame codec.
    TrainFrame(TrainFrameArgs),
    /// Encode every frame with a trained frame codec.
    EncodeFrames(EncodeFramesArgs),
    /// Train the sequence codec on augmented frame features.
    TrainSeq(TrainSeqArgs),
    /// Encode sequences (derived siblings by default).
    EncodeSeqs(EncodeSeqsArgs),
    /// K-means on sequence features.
    Cluster(ClusterArgs),
    /// Re-evaluate a run directory from its persisted artifacts.
    Evaluate(EvaluateArgs),
    /// DTW + k-medoids baseline on a derived subset.
    Baseline(BaselineArgs),
    /// Full pipeline, optionally with the ablation suite.
    Run(RunArgs),
    /// Distance and similarity plots for a run directory.
    Plot(PlotArgs),
}

#[derive(Args)]
struct DataArg {
    /// Data directory; synthetic data from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Template list (TOML or JSON); all six templates when omitted.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RasterArgs {
    #[arg(long)]
    pixels: Option<usize>,
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    vmax: Option<f64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    raster: RasterArgs,
}

#[derive(Args)]
struct TrainFrameArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_triplet: bool,
    #[command(flatten)]
    raster: RasterArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeFramesArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    vmax: Option<f64>,
    /// DSC1 file with one tensor per sequence; ids go to `<out>.ids.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SeqFlagArgs {
    #[arg(long)]
    no_prediction: bool,
    #[arg(long)]
    no_reconstruction: bool,
    #[arg(long)]
    no_reverse_order: bool,
}

#[derive(Args)]
struct TrainSeqArgs {
    /// Frame features from `encode-frames`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    flags: SeqFlagArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeSeqsArgs {
    #[arg(long)]
    features: PathBuf,
    /// Sequence codec checkpoint; average pooling when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Encode the original sequences instead of their derived siblings.
    #[arg(long)]
    originals: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    features: PathBuf,
    /// A cluster count or `auto:KMIN..KMAX` for silhouette selection.
    #[arg(long, default_value = "auto:2..10")]
    k: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `run`.
    #[arg(long)]
    run: PathBuf,
    /// Report path; `<run>/report.json` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_components: Option<usize>,
    /// Derived sequences in the subset; 0 uses the whole derived set.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArg,
    /// Run directory; `$DRIVECLUSTER_RUN_ROOT/run-<seed>` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run every ablation and write a comparison table.
    #[arg(long)]
    ablations: bool,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    frame_epochs: Option<usize>,
    #[arg(long)]
    seq_epochs: Option<usize>,
    #[arg(long)]
    joint_epochs: Option<usize>,
    #[arg(long)]
    pixels: Option<usize>,
    #[command(flatten)]
    flags: SeqFlagArgs,
    #[arg(long)]
    no_triplet: bool,
    #[arg(long)]
    sequence_average: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    run: PathBuf,
    /// Sequences to draw frame-similarity matrices for (default: first three).
    #[arg(long)]
    probe: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 configuration, 3 data, 4 stage failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Parse { .. }
        | Error::Reference { .. }
        | Error::Validation { .. }
        | Error::Format { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::BaselineScale { .. } => 3,
        Error::Stage { .. } | Error::Shape(_) => 4,
    }
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_toml_str(&fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?)?,
        None => PipelineConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Synth(a) => synth(&mut cfg, cli.seed, a),
        Command::Render(a) => render(&mut cfg, a),
        Command::TrainFrame(a) => train_frame(&mut cfg, a),
        Command::EncodeFrames(a) => encode_frames(&mut cfg, a),
        Command::TrainSeq(a) => train_seq(&mut cfg, a),
        Command::EncodeSeqs(a) => encode_seqs(&cfg, a),
        Command::Cluster(a) => cluster(&cfg, a),
        Command::Evaluate(a) => evaluate(a),
        Command::Baseline(a) => baseline(&mut cfg, a),
        Command::Run(a) => run(&mut cfg, a),
        Command::Plot(a) => plot(a),
    }
}

fn apply_raster(raster: &mut RasterConfig, a: &RasterArgs) -> Result<()> {
    if let Some(p) = a.pixels {
        raster.pixels = p;
    }
    if let Some(e) = a.extent {
        raster.extent = e;
    }
    if let Some(v) = a.vmax {
        raster.v_max = v;
    }
    raster.validate()
}

fn apply_seq_flags(ablation: &mut AblationFlags, a: &SeqFlagArgs) {
    ablation.no_prediction |= a.no_prediction;
    ablation.no_reconstruction |= a.no_reconstruction;
    ablation.no_reverse_order |= a.no_reverse_order;
}

fn data_for(cfg: &mut PipelineConfig, a: &DataArg) -> Result<LoadedData> {
    if let Some(dir) = &a.data {
        cfg.data.dir = Some(dir.clone());
    }
    load_data(&cfg.data)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    templates: Vec<ScenarioTemplate>,
}

fn read_templates(path: &Path) -> Result<Vec<ScenarioTemplate>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        if let Ok(list) = serde_json::from_str::<Vec<ScenarioTemplate>>(&text) {
            return Ok(list);
        }
        let f: TemplateFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(f.templates)
    } else {
        let f: TemplateFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(f.templates)
    }
}

fn synth(cfg: &mut PipelineConfig, seed: Option<u64>, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.data.synth;
    if let Some(path) = &a.templates {
        s.templates = read_templates(path)?;
    }
    if let Some(c) = a.count {
        s.count_per_template = c;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let out = generate_dataset(&s.templates, s.count_per_template, s.seed)?;
    write_dataset(&out.dataset, &a.out)?;
    write_labels(&out.labels, &a.out)?;
    println!("wrote {} sequences to {}", out.dataset.len(), a.out.display());
    Ok(())
}

fn render(cfg: &mut PipelineConfig, a: RenderArgs) -> Result<()> {
    apply_raster(&mut cfg.raster, &a.raster)?;
    let ds = parse_dataset(&a.data)?;
    ds.validate()?;
    fs::create_dir_all(&a.out)?;
    let p = cfg.raster.pixels;
    let mut files = BTreeMap::new();
    for (i, seq) in ds.sequences.iter().enumerate() {
        let map = ds.map_for(seq)?;
        let mut data = Vec::with_capacity(seq.len() * 4 * p * p);
        for f in &seq.frames {
            data.extend(rasterize_frame(f, map, &cfg.raster).into_vec());
        }
        let name = format!("seq_{i:05}.dsc1");
        write_dsc1(a.out.join(&name), &[Tensor::new(vec![seq.len(), 4, p, p], data)?])?;
        files.insert(seq.id.clone(), name);
    }
    write_json(&a.out.join("manifest.json"), &json!({ "raster": cfg.raster, "files": files }))?;
    println!("rendered {} sequences to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_frame(cfg: &mut PipelineConfig, a: TrainFrameArgs) -> Result<()> {
    apply_raster(&mut cfg.raster, &a.raster)?;
    if let Some(e) = a.epochs {
        cfg.frame.epochs = e;
    }
    cfg.ablation.no_triplet |= a.no_triplet;
    cfg.validate()?;
    let data = data_for(cfg, &a.data)?;
    let fcfg = cfg.effective_frame();
    let source = LazyRender {
        dataset: &data.dataset,
        raster: &cfg.raster,
    };
    let model = train_frame_model(&source, &fcfg).map_err(|e| e.in_stage(pipeline::STAGE_FRAME))?;
    model.to_checkpoint(&fcfg)?.save(&a.out)?;
    if let (Some(first), Some(last)) = (model.history.first(), model.history.last()) {
        println!("frame loss {:.6} -> {:.6} over {} epochs", first.total, last.total, model.history.len());
    }
    Ok(())
}

fn encode_frames(cfg: &mut PipelineConfig, a: EncodeFramesArgs) -> Result<()> {
    let (model, _) = FrameCodec::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    cfg.raster.pixels = model.pixels;
    apply_raster(
        &mut cfg.raster,
        &RasterArgs {
            pixels: None,
            extent: a.extent,
            vmax: a.vmax,
        },
    )?;
    let data = data_for(cfg, &a.data)?;
    let source = LazyRender {
        dataset: &data.dataset,
        raster: &cfg.raster,
    };
    let features = encode_source(&model, &source)?;
    let tensors = features.iter().map(|f| Tensor::from_rows(f)).collect::<Result<Vec<_>>>()?;
    write_dsc1(&a.out, &tensors)?;
    let ids: Vec<String> = data.dataset.sequences.iter().map(|s| s.id.clone()).collect();
    write_manifest(&a.out, &ids)?;
    println!("encoded {} sequences to {}", ids.len(), a.out.display());
    Ok(())
}

/// Per-sequence frame features and their ids.
fn read_frame_features(path: &Path) -> Result<(Vec<String>, Vec<Vec<Vec<f32>>>)> {
    let features = read_dsc1(path)?.iter().map(Tensor::rows).collect::<Result<Vec<_>>>()?;
    let ids = read_manifest(path)?;
    if ids.len() != features.len() {
        return Err(Error::format(path, format!("{} tensors but {} ids", features.len(), ids.len())));
    }
    Ok((ids, features))
}

fn derived_from(cfg: &PipelineConfig, ids: &[String], features: &[Vec<Vec<f32>>]) -> Result<(Vec<String>, Vec<Vec<Vec<f32>>>)> {
    let index: Vec<(&str, usize)> = ids.iter().map(String::as_str).zip(features.iter().map(Vec::len)).collect();
    let groups = augment_all(&index, cfg.evaluation.n_derived, cfg.augment_seed())?;
    let derived_ids = groups.iter().flat_map(|g| g.derived_ids.iter().cloned()).collect();
    Ok((derived_ids, derived_features(features, &groups)))
}

fn train_seq(cfg: &mut PipelineConfig, a: TrainSeqArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.sequence.epochs = e;
    }
    apply_seq_flags(&mut cfg.ablation, &a.flags);
    cfg.validate()?;
    let (ids, features) = read_frame_features(&a.features)?;
    let (_, derived) = derived_from(cfg, &ids, &features)?;
    let scfg = cfg.effective_sequence();
    let model = train_sequence_model(&derived, &scfg).map_err(|e| e.in_stage(pipeline::STAGE_SEQUENCE))?;
    model.to_checkpoint(&scfg)?.save(&a.out)?;
    if let (Some(first), Some(last)) = (model.history.first(), model.history.last()) {
        println!("sequence loss {:.6} -> {:.6} over {} epochs", first.total, last.total, model.history.len());
    }
    Ok(())
}

fn encode_seqs(cfg: &PipelineConfig, a: EncodeSeqsArgs) -> Result<()> {
    let (ids, features) = read_frame_features(&a.features)?;
    let (ids, seqs) = if a.originals {
        (ids, features)
    } else {
        derived_from(cfg, &ids, &features)?
    };
    let out = match &a.model {
        Some(path) => {
            let (model, scfg) = SeqCodec::from_checkpoint(&Checkpoint::load(path)?)?;
            model.encode_features(&seqs, scfg.pair_mode, scfg.stride)?
        }
        None => average_pool(&seqs)?,
    };
    write_dsc1(&a.out, &[Tensor::from_rows(&out)?])?;
    write_manifest(&a.out, &ids)?;
    println!("encoded {} sequences to {}", ids.len(), a.out.display());
    Ok(())
}

enum KChoice {
    Fixed(usize),
    Auto(usize, usize),
}

fn parse_k(s: &str) -> Result<KChoice> {
    let bad = || Error::Config(format!("--k expects an integer or auto:KMIN..KMAX, got {s:?}"));
    if let Some(range) = s.strip_prefix("auto:") {
        let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
        Ok(KChoice::Auto(lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?))
    } else {
        Ok(KChoice::Fixed(s.parse().map_err(|_| bad())?))
    }
}

fn cluster(cfg: &PipelineConfig, a: ClusterArgs) -> Result<()> {
    let choice = parse_k(&a.k)?;
    let tensors = read_dsc1(&a.features)?;
    let [t] = tensors.as_slice() else {
        return Err(Error::format(&a.features, "expected exactly one feature matrix"));
    };
    let points = to_f64_rows(&t.rows()?);
    let ids = read_manifest(&a.features).ok().filter(|ids| ids.len() == points.len());
    let seed = cfg.cluster_seed();
    let km = &cfg.evaluation.kmeans;
    let (assignment, table) = match choice {
        KChoice::Fixed(k) => (kmeans(&points, k, seed, km)?, Vec::new()),
        KChoice::Auto(lo, hi) => {
            let sel = select_num_clusters(&points, lo, hi, seed, km)?;
            (sel.assignment, sel.table)
        }
    };
    let silhouette = if assignment.k >= 2 && assignment.k < points.len() {
        Some(silhouette_score(&points, &assignment.labels)?)
    } else {
        None
    };
    let centroids_path = a.out.with_extension("centroids.dsc1");
    let centroid_rows: Vec<Vec<f32>> = assignment.centroids.iter().map(|c| c.iter().map(|&v| v as f32).collect()).collect();
    if let Some(parent) = centroids_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dsc1(&centroids_path, &[Tensor::from_rows(&centroid_rows)?])?;
    let labels = match ids {
        Some(ids) => json!(ids.iter().cloned().zip(assignment.labels.iter().copied()).collect::<BTreeMap<_, _>>()),
        None => json!(assignment.labels),
    };
    let centroids_name = centroids_path.file_name().map(|n| n.to_string_lossy().into_owned());
    write_json(
        &a.out,
        &json!({
            "k": assignment.k,
            "inertia": assignment.inertia,
            "silhouette": silhouette,
            "silhouette_table": table,
            "labels": labels,
            "centroids": centroids_name,
            "seed": seed,
        }),
    )?;
    println!("k = {} written to {}", assignment.k, a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.run)?;
    let models = load_models(&a.run)?;
    let data = load_data(&cfg.data).map_err(|e| e.in_stage(pipeline::STAGE_DATA))?;
    let ev = pipeline::evaluate_models(&data, &models, &cfg).map_err(|e| e.in_stage(pipeline::STAGE_EVALUATION))?;
    let out = a.out.unwrap_or_else(|| a.run.join(REPORT_FILE));
    fs::write(&out, report_json(&ev.report)?)?;
    print_summary(&ev.report, &out);
    Ok(())
}

fn print_summary(r: &pipeline::EvaluationReport, out: &Path) {
    let purity = r.purity.map_or(String::new(), |p| format!(" purity {p:.4}"));
    println!("{}: TP {:.4} FP {:.4}{purity} k {} -> {}", r.method, r.tp, r.fp, r.k, out.display());
}

fn baseline(cfg: &mut PipelineConfig, a: BaselineArgs) -> Result<()> {
    let b: &mut BaselineConfig = &mut cfg.baseline;
    if a.k.is_some() {
        b.k = a.k;
    }
    if let Some(n) = a.n_components {
        b.n_components = n;
    }
    let data = data_for(cfg, &a.data)?;
    let subset = a.subset.unwrap_or(cfg.evaluation.baseline_subset);
    let report = run_baseline(&data, cfg, subset, None)?;
    write_json(&a.out, &report)?;
    print_summary(&report, &a.out);
    Ok(())
}

fn run_dir(out: Option<PathBuf>, seed: u64) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("run-{seed}"))
    })
}

fn run(cfg: &mut PipelineConfig, a: RunArgs) -> Result<()> {
    if let Some(dir) = &a.data.data {
        cfg.data = DataConfig {
            dir: Some(dir.clone()),
            ..cfg.data.clone()
        };
    }
    if let Some(c) = a.count {
        cfg.data.synth.count_per_template = c;
    }
    if let Some(e) = a.frame_epochs {
        cfg.frame.epochs = e;
    }
    if let Some(e) = a.seq_epochs {
        cfg.sequence.epochs = e;
    }
    if let Some(e) = a.joint_epochs {
        cfg.joint.epochs = e;
    }
    if let Some(p) = a.pixels {
        cfg.raster.pixels = p;
    }
    apply_seq_flags(&mut cfg.ablation, &a.flags);
    cfg.ablation.no_triplet |= a.no_triplet;
    cfg.ablation.sequence_average |= a.sequence_average;
    cfg.validate()?;
    let dir = run_dir(a.out, cfg.seed);
    let out = run_pipeline(cfg, Some(&dir))?;
    print_summary(&out.evaluated.report, &dir.join(REPORT_FILE));
    if a.ablations {
        let data = load_data(&cfg.data)?;
        let full = (cfg.ablation == AblationFlags::default()).then_some(&out);
        let rows = run_ablations_on(&data, cfg, &AblationFlags::NAMES, Some(&dir), full)?;
        for r in &rows {
            println!("{:<20} TP {:.4} FP {:.4} k {}", r.method, r.tp, r.fp, r.k);
        }
        println!("ablation table written to {}", dir.join("ablations.md").display());
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let seq_path = a.run.join(SEQ_FEATURES_FILE);
    let tensors = read_dsc1(&seq_path)?;
    let [t] = tensors.as_slice() else {
        return Err(Error::format(&seq_path, "expected exactly one feature matrix"));
    };
    let seq_features = t.rows()?;
    let seq_ids = read_manifest(&seq_path)?;
    let clusters_path = a.run.join(CLUSTERS_FILE);
    let clusters: BTreeMap<String, usize> = serde_json::from_str(&fs::read_to_string(&clusters_path)?)
        .map_err(|e| Error::format(&clusters_path, e.to_string()))?;
    let labels = seq_ids
        .iter()
        .map(|id| clusters.get(id).copied().ok_or_else(|| Error::format(&clusters_path, format!("no cluster for {id}"))))
        .collect::<Result<Vec<_>>>()?;
    let (frame_ids, frames) = read_frame_features(&a.run.join(FRAME_FEATURES_FILE))?;
    let picks: Vec<usize> = if a.probe.is_empty() {
        (0..frame_ids.len().min(3)).collect()
    } else {
        a.probe
            .iter()
            .map(|p| frame_ids.iter().position(|id| id == p).ok_or_else(|| Error::Config(format!("unknown sequence {p:?}"))))
            .collect::<Result<_>>()?
    };
    let probes: Vec<(&str, &[Vec<f32>])> = picks.iter().map(|&i| (frame_ids[i].as_str(), frames[i].as_slice())).collect();
    let out = a.out.unwrap_or_else(|| a.run.join("plots"));
    emit_plots(&out, &seq_features, &labels, &probes)?;
    println!("plots written to {}", out.display());
    Ok(())
}
