//! `mvgaze`: scripted access to the multi-view gaze pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mvgaze_core::camera::{
    epipolar_segment, fundamental_matrix, sample_epipolar, visible_epipolar_segment, Camera, Pixel,
};
use mvgaze_core::data::{categorize, enumerate_pairs, Annotation, PairMode, ScenePack};
use mvgaze_core::depth::{dpth, ransac_scale_shift, AbsoluteDepthMap, DepthMap, PixelMask, RansacConfig};
use mvgaze_core::eval::{aggregate_by_primary, EvalRecord};
use mvgaze_core::gaze::{fov_heatmap, ground_truth_gaze, DecayConfig, EyeLocation};
use mvgaze_core::imageio;
use mvgaze_core::linalg::Vec3;
use mvgaze_core::nn::{self, checkpoint, FovSource, ToyConfig, ToyModel, TrainConfig};
use mvgaze_core::selection::{select_and_transfer, GazePrediction};
use mvgaze_core::synth::{generate, SynthConfig};
use mvgaze_core::depth::pseudo_pointcloud;

#[derive(Parser, Debug)]
#[command(name = "mvgaze", version, about = "Multi-view gaze target estimation toolkit")]
struct Cli {
    /// JSON object whose keys (flag names) override the subcommand's flags.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-camera scene.
    Synth(SynthArgs),
    /// Field-of-view heatmap for one view of a manifest.
    Fov(FovArgs),
    /// Sample the epipolar line of a pixel in another camera.
    Epipolar(EpipolarArgs),
    /// Fit absolute = a·relative + b with RANSAC.
    AlignDepth(AlignArgs),
    /// Uncertainty-based gaze selection between two predictions.
    Select(SelectArgs),
    /// Dist./AP/angular metrics for a predictions file.
    Eval(EvalArgs),
    /// Train the toy model; writes a checkpoint and a loss curve.
    TrainToy(TrainArgs),
    /// Run a checkpoint on one view pair.
    Infer(InferArgs),
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    cameras: usize,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 384)]
    height: u32,
    #[arg(long, default_value_t = 1)]
    instants: usize,
    #[arg(long, default_value_t = 2)]
    occluders: usize,
    /// Relative depth noise written to the noisy depth files.
    #[arg(long, default_value_t = 0.0)]
    depth_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    /// Uniform annotation jitter in pixels.
    #[arg(long, default_value_t = 0.0)]
    pixel_jitter: f64,
    /// Views in which the target must be visible.
    #[arg(long, default_value_t = 2)]
    min_target_views: usize,
    /// Skip RGB rendering.
    #[arg(long)]
    no_images: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct FovArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    instant: u64,
    #[arg(long)]
    camera: String,
    #[arg(long)]
    subject: Option<String>,
    /// Camera-frame gaze `x,y,z`; defaults to the annotated eye-to-target vector.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    gaze: Option<Vec<f64>>,
    /// Eye pixel `u,v`; defaults to the annotation.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    eye: Option<Vec<f64>>,
    /// Use the exact (reference) depth instead of the possibly noisy one.
    #[arg(long)]
    exact_depth: bool,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    #[arg(long)]
    out_png: PathBuf,
    #[arg(long)]
    out_dpth: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct EpipolarArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
    /// Pixel `u,v` in the `from` camera.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    point: Vec<f64>,
    #[arg(long, default_value_t = 48)]
    samples: usize,
    /// Keep only the part of the line in front of the `to` camera.
    #[arg(long)]
    visible: bool,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct AlignArgs {
    /// Relative depth (DPTH).
    #[arg(long)]
    relative: PathBuf,
    /// Reference absolute depth (DPTH).
    #[arg(long)]
    absolute: PathBuf,
    /// PNG; nonzero pixels are used for the fit.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.02)]
    threshold_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    min_inlier_ratio: f64,
    #[arg(long, default_value_t = 100)]
    min_inlier_pixels: usize,
    /// Write the corrected depth here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct SelectArgs {
    /// Manifest providing the cameras named by the predictions' `view_id`.
    #[arg(long)]
    manifest: PathBuf,
    /// `{view_id, g: {x, y, z}, sigma}`.
    #[arg(long)]
    first: PathBuf,
    #[arg(long)]
    second: PathBuf,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// JSON list of `{primary_image_id, reference_camera_id, point, p_in, gaze?}`.
    #[arg(long)]
    predictions: PathBuf,
    /// Metrics CSV; a JSON copy is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "MVGAZE_THREADS", default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FovSourceArg {
    Predicted,
    GroundTruth,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct TrainArgs {
    /// Training manifests; alternatively use --synth-seed.
    #[arg(long)]
    manifest: Vec<PathBuf>,
    /// Generate training scenes in memory from this seed.
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = FovSourceArg::Predicted)]
    fov_source: FovSourceArg,
    /// Model initialization and minibatch order.
    #[arg(long)]
    seed: u64,
    #[arg(long, env = "MVGAZE_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Synthetic scene size for --synth-seed.
    #[arg(long, default_value_t = 4)]
    synth_cameras: usize,
    #[arg(long, default_value_t = 256)]
    synth_width: u32,
    #[arg(long, default_value_t = 192)]
    synth_height: u32,
    #[arg(long, default_value_t = 4)]
    synth_instants: usize,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    curve: PathBuf,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model configuration; defaults to `<checkpoint>.json` when present.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    instant: u64,
    #[arg(long)]
    primary: String,
    #[arg(long)]
    reference: String,
    #[arg(long)]
    subject: Option<String>,
    /// Write the 64×64 primary heatmap as PNG.
    #[arg(long)]
    heatmap_png: Option<PathBuf>,
}

/// Bad flags or configuration: exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Overlays the JSON object at `path` onto the parsed flags.
fn with_config<A: Serialize + DeserializeOwned>(args: A, path: Option<&Path>) -> anyhow::Result<A> {
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let overrides: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let Value::Object(overrides) = overrides else {
        return Err(usage(format!("{}: expected a JSON object", path.display())));
    };
    let mut base = serde_json::to_value(&args)?;
    let fields = base.as_object_mut().expect("flag structs serialize to objects");
    for (k, v) in overrides {
        let key = k.replace('-', "_");
        if !fields.contains_key(&key) {
            return Err(usage(format!("{}: unknown option '{k}'", path.display())));
        }
        fields.insert(key, v);
    }
    serde_json::from_value(base).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nUsage: mvgaze <COMMAND> [OPTIONS]; see `mvgaze --help`");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => synth(with_config(a, cfg)?),
        Command::Fov(a) => fov(with_config(a, cfg)?),
        Command::Epipolar(a) => epipolar(with_config(a, cfg)?),
        Command::AlignDepth(a) => align_depth(with_config(a, cfg)?),
        Command::Select(a) => select(with_config(a, cfg)?),
        Command::Eval(a) => eval(with_config(a, cfg)?),
        Command::TrainToy(a) => train_toy(with_config(a, cfg)?),
        Command::Infer(a) => infer(with_config(a, cfg)?),
    }
}

fn arity(name: &str, v: &[f64], n: usize) -> anyhow::Result<()> {
    if v.len() != n {
        return Err(usage(format!("--{name} takes {n} comma-separated numbers, got {}", v.len())));
    }
    Ok(())
}

fn print_json(v: &impl Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_pack(path: &Path) -> anyhow::Result<ScenePack<f64>> {
    ScenePack::load(path).with_context(|| format!("loading {}", path.display()))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn pack_camera<'a>(pack: &'a ScenePack<f64>, id: &str) -> anyhow::Result<&'a Camera<f64>> {
    pack.camera(id).ok_or_else(|| anyhow!("camera '{id}' not in the manifest"))
}

fn find_annotation<'a>(
    pack: &'a ScenePack<f64>,
    instant: u64,
    camera: &str,
    subject: Option<&str>,
) -> anyhow::Result<(&'a mvgaze_core::data::Frame<f64>, &'a Annotation<f64>)> {
    let frame = pack
        .frames
        .iter()
        .find(|f| f.instant == instant)
        .ok_or_else(|| anyhow!("no frame at instant {instant}"))?;
    let ann = frame
        .annotations
        .iter()
        .find(|a| a.camera_id == camera && subject.is_none_or(|s| a.subject_id == s))
        .ok_or_else(|| anyhow!("no annotation for camera '{camera}' at instant {instant}"))?;
    Ok((frame, ann))
}

fn load_depth(base: &Path, files: &BTreeMap<String, String>, camera: &str) -> anyhow::Result<DepthMap<f64>> {
    let rel = files.get(camera).ok_or_else(|| anyhow!("no depth file for camera '{camera}'"))?;
    DepthMap::load(base.join(rel)).with_context(|| format!("loading {rel}"))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        camera_count: a.cameras,
        width: a.width,
        height: a.height,
        instants: a.instants,
        occluder_count: a.occluders,
        depth_noise: a.depth_noise,
        outlier_fraction: a.outlier_fraction,
        pixel_jitter: a.pixel_jitter,
        min_target_views: a.min_target_views,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let scene = generate(&cfg)?;
    let pack = scene.write(&a.out, !a.no_images)?;
    print_json(&json!({
        "manifest": a.out.join("manifest.json"),
        "ground_truth": a.out.join("ground_truth.json"),
        "cameras": pack.cameras.len(),
        "frames": pack.frames.len(),
    }))
}

fn fov(a: FovArgs) -> anyhow::Result<()> {
    if let Some(g) = &a.gaze {
        arity("gaze", g, 3)?;
    }
    if let Some(e) = &a.eye {
        arity("eye", e, 2)?;
    }
    let pack = load_pack(&a.manifest)?;
    let base = base_dir(&a.manifest);
    let cam = pack_camera(&pack, &a.camera)?;
    let (frame, ann) = find_annotation(&pack, a.instant, &a.camera, a.subject.as_deref())?;
    let files = if a.exact_depth { &frame.reference_depth_files } else { &frame.depth_files };
    let depth = load_depth(&base, files, &a.camera)?;
    let eye_px = match &a.eye {
        Some(e) => Pixel::new(e[0], e[1]),
        None => ann.eye_or_head_center().ok_or_else(|| anyhow!("no eye or head box annotated; pass --eye"))?,
    };
    let eye = EyeLocation::from_depth(cam, &depth, eye_px)?;
    let cloud = pseudo_pointcloud(cam, &depth)?;
    let g = match &a.gaze {
        Some(g) => Vec3::new(g[0], g[1], g[2]),
        None => {
            let target = ann.gaze_point.ok_or_else(|| anyhow!("no gaze point annotated; pass --gaze"))?;
            ground_truth_gaze(&cloud, &eye, target)?
        }
    };
    let decay = DecayConfig { threshold: a.threshold, gamma: a.gamma };
    let map = fov_heatmap(&cloud, &eye, g, &decay)?;
    map.save_png(&a.out_png)?;
    if let Some(p) = &a.out_dpth {
        map.save_dpth(p)?;
    }
    let (u, v) = map.argmax();
    print_json(&json!({
        "width": map.width,
        "height": map.height,
        "argmax": [u, v],
        "gaze": [g.x, g.y, g.z],
        "target_px": ann.gaze_point.map(|p| [p.u, p.v]),
    }))
}

fn epipolar(a: EpipolarArgs) -> anyhow::Result<()> {
    arity("point", &a.point, 2)?;
    let pack = load_pack(&a.manifest)?;
    let (c1, c2) = (pack_camera(&pack, &a.from)?, pack_camera(&pack, &a.to)?);
    if a.samples < 2 {
        return Err(usage("--samples must be at least 2"));
    }
    let px = Pixel::new(a.point[0], a.point[1]);
    let seg = if a.visible {
        visible_epipolar_segment(c1, c2, px)
    } else {
        epipolar_segment(&fundamental_matrix(c1, c2)?, px, &c2.intrinsics)
    };
    let out = match seg {
        Some(s) => {
            let pts = sample_epipolar(&s, a.samples)?;
            json!({
                "segment": [[s.start.u, s.start.v], [s.end.u, s.end.v]],
                "samples": pts.iter().map(|p| [p.u, p.v]).collect::<Vec<_>>(),
            })
        }
        None => json!({ "segment": null, "samples": [] }),
    };
    print_json(&out)
}

fn read_mask(path: &Path, width: usize, height: usize) -> anyhow::Result<PixelMask> {
    let img = imageio::read(path)?;
    if (img.width, img.height) != (width, height) {
        bail!("mask is {}×{}, depth is {width}×{height}", img.width, img.height);
    }
    Ok(PixelMask::from_fn(width, height, |u, v| img.pixel(u, v).iter().any(|&b| b != 0)))
}

fn align_depth(a: AlignArgs) -> anyhow::Result<()> {
    let rel = DepthMap::<f64>::load(&a.relative).with_context(|| format!("loading {}", a.relative.display()))?;
    let abs = AbsoluteDepthMap(
        DepthMap::<f64>::load(&a.absolute).with_context(|| format!("loading {}", a.absolute.display()))?,
    );
    let (w, h) = rel.size();
    let mask = match &a.mask {
        Some(p) => read_mask(p, w, h)?,
        None => PixelMask::filled(w, h, true),
    };
    let cfg = RansacConfig {
        iterations: a.iterations,
        threshold_fraction: a.threshold_fraction,
        min_inlier_ratio: a.min_inlier_ratio,
        min_inlier_pixels: a.min_inlier_pixels,
        seed: a.seed,
    };
    let fit = ransac_scale_shift(&rel, &abs, &mask, &cfg)?;
    if let Some(out) = &a.out {
        let data: Vec<f32> = rel.iter().map(|d| (fit.a * d + fit.b) as f32).collect();
        dpth::write(out, w, h, &data)?;
    }
    print_json(&fit)
}

fn select(a: SelectArgs) -> anyhow::Result<()> {
    let pack = load_pack(&a.manifest)?;
    let read = |p: &Path| -> anyhow::Result<GazePrediction<f64>> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let raw: GazePrediction<f64> = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        Ok(GazePrediction::new(raw.view_id, raw.g, raw.sigma)?)
    };
    let (p1, p2) = (read(&a.first)?, read(&a.second)?);
    let c1 = pack_camera(&pack, &p1.view_id)?;
    let c2 = pack_camera(&pack, &p2.view_id)?;
    print_json(&select_and_transfer(&p1, &p2, &c1.extrinsics, &c2.extrinsics))
}

#[derive(Debug, Deserialize)]
struct PredictionEntry {
    primary_image_id: String,
    reference_camera_id: String,
    point: [f64; 2],
    p_in: f64,
    #[serde(default)]
    gaze: Option<[f64; 3]>,
}

fn normalized(p: Pixel<f64>, cam: &Camera<f64>) -> [f64; 2] {
    let (w, h) = cam.intrinsics.size();
    [(p.u + 0.5) / w as f64, (p.v + 0.5) / h as f64]
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.predictions).with_context(|| format!("reading {}", a.predictions.display()))?;
    let preds: Vec<PredictionEntry> = serde_json::from_str(&text).context("parsing predictions")?;
    let mut pairs = BTreeMap::new();
    for m in &a.manifest {
        let pack = load_pack(m)?;
        let base = base_dir(m);
        for mode in [PairMode::Standard, PairMode::CrossView] {
            for s in enumerate_pairs(&pack, mode) {
                let key = (s.primary.annotation.image_id.clone(), s.reference.camera.id.clone());
                pairs.insert(key, (s, base.clone()));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.threads.max(1)).build()?;
    let records: Vec<EvalRecord<f64>> = pool.install(|| {
        use rayon::prelude::*;
        preds
            .par_iter()
            .map(|p| {
                let key = (p.primary_image_id.clone(), p.reference_camera_id.clone());
                let (s, base) = pairs
                    .get(&key)
                    .ok_or_else(|| anyhow!("no pair ({}, {}) in the manifests", key.0, key.1))?;
                let ann = &s.primary.annotation;
                let cam = &s.primary.camera;
                let gt_in = ann.visibility.in_frame();
                let gt_point = ann.gaze_point.filter(|_| gt_in).map(|g| normalized(g, cam));
                let gt_gaze = match (p.gaze, ann.eye_or_head_center().filter(|_| ann.head_visible()), gt_point) {
                    (Some(_), Some(eye_px), Some(_)) => {
                        let depth = s.primary.load_reference_depth(base)?;
                        let cloud = pseudo_pointcloud(cam, &depth)?;
                        let eye = EyeLocation::from_depth(cam, &depth, eye_px)?;
                        ground_truth_gaze(&cloud, &eye, ann.gaze_point.expect("in frame")).ok().map(|g| g.to_array())
                    }
                    _ => None,
                };
                Ok(EvalRecord {
                    primary_image_id: p.primary_image_id.clone(),
                    reference_camera_id: p.reference_camera_id.clone(),
                    predicted_point: p.point,
                    gt_point,
                    p_in: p.p_in,
                    gt_in,
                    category: categorize(s),
                    predicted_gaze: p.gaze,
                    gt_gaze,
                })
            })
            .collect::<anyhow::Result<_>>()
    })?;
    let report = aggregate_by_primary(&records)?;
    report.write(&a.out)?;
    print_json(&report)
}

fn train_toy(a: TrainArgs) -> anyhow::Result<()> {
    let model_cfg = ToyConfig { d: a.width, heads: a.heads, seed: a.seed, ..ToyConfig::default() };
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data: Vec<nn::PreparedPair<f64>> = match (a.manifest.is_empty(), a.synth_seed) {
        (false, None) => {
            let mut out = Vec::new();
            for m in &a.manifest {
                let pack = load_pack(m)?;
                let left = a.pairs - out.len().min(a.pairs);
                out.extend(nn::pairs_from_manifest(&pack, &base_dir(m), PairMode::Standard, &model_cfg, Some(left))?);
            }
            out
        }
        (true, Some(seed)) => {
            let template = SynthConfig {
                seed,
                camera_count: a.synth_cameras,
                width: a.synth_width,
                height: a.synth_height,
                instants: a.synth_instants,
                ..SynthConfig::default()
            };
            template.validate().map_err(|e| usage(e.to_string()))?;
            nn::prepare::synth_training_pairs(&template, a.pairs, &model_cfg)?
        }
        _ => return Err(usage("pass either --manifest or --synth-seed")),
    };
    if data.is_empty() {
        bail!("no standard view pairs in the training data");
    }
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        weights: nn::LossWeights { alpha: a.alpha, beta: a.beta, lambda: a.lambda },
        fov_source: match a.fov_source {
            FovSourceArg::Predicted => FovSource::Predicted,
            FovSourceArg::GroundTruth => FovSource::GroundTruth,
        },
        seed: a.seed,
        threads: Some(a.threads.max(1)),
    };
    let mut model = ToyModel::<f64>::new(model_cfg)?;
    let report = nn::train(&mut model, &data, &tc)?;
    checkpoint::save(&model, &a.checkpoint)?;
    std::fs::write(sidecar(&a.checkpoint), serde_json::to_string_pretty(&model_cfg)?)?;
    report.write_csv(&a.curve)?;
    let reduction = 1.0 - report.final_loss.total / report.initial.total;
    print_json(&json!({
        "pairs": data.len(),
        "steps": tc.steps,
        "initial": report.initial,
        "final": report.final_loss,
        "reduction": reduction,
        "checkpoint": a.checkpoint,
        "curve": a.curve,
    }))
}

fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let cfg_path = a.model_config.clone().unwrap_or_else(|| sidecar(&a.checkpoint));
    let model_cfg: ToyConfig = match std::fs::read_to_string(&cfg_path) {
        Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", cfg_path.display()))?,
        Err(_) if a.model_config.is_none() => ToyConfig::default(),
        Err(e) => bail!("{}: {e}", cfg_path.display()),
    };
    let mut model = ToyModel::<f64>::new(model_cfg)?;
    checkpoint::load(&mut model, &a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;

    let pack = load_pack(&a.manifest)?;
    let base = base_dir(&a.manifest);
    let sample = [PairMode::Standard, PairMode::CrossView]
        .into_iter()
        .flat_map(|m| enumerate_pairs(&pack, m))
        .find(|s| {
            s.instant == a.instant
                && s.primary.camera.id == a.primary
                && s.reference.camera.id == a.reference
                && a.subject.as_deref().is_none_or(|x| s.primary.annotation.subject_id == x)
        })
        .ok_or_else(|| anyhow!("no annotated pair {} → {} at instant {}", a.primary, a.reference, a.instant))?;
    let mut limited = pack.clone();
    limited.frames.retain(|f| f.instant == a.instant);
    for f in &mut limited.frames {
        f.annotations.retain(|x| x.subject_id == sample.primary.annotation.subject_id);
    }
    let pairs: Vec<nn::PreparedPair<f64>> = nn::pairs_from_manifest(&limited, &base, sample.kind, &model_cfg, None)?;
    let pair = pairs
        .iter()
        .find(|p| p.primary_image_id == sample.primary.annotation.image_id && p.reference_camera_id == a.reference)
        .ok_or_else(|| anyhow!("pair could not be prepared"))?;
    let out = nn::infer(&model, &pair.input)?;
    if let Some(p) = &a.heatmap_png {
        let (lo, hi) = out.heatmap.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let bytes: Vec<u8> = out.heatmap.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
        imageio::write_gray8(p, nn::HEATMAP_SIZE, nn::HEATMAP_SIZE, &bytes)?;
    }
    print_json(&out)
}
