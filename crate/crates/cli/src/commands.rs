//! Subcommand implementations. Stages exchange data through files in a work
//! directory, so running them one by one matches a full pipeline run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adasfm_core::global_sfm::run_global_sfm;
use adasfm_core::match_refine::refine_graph;
use adasfm_core::partition::{partition_view_graph, PartitionSet};
use adasfm_core::pipeline::{final_bundle_adjustment, global_priors, run_align_stage, run_local_stage, PipelineConfig};
use adasfm_core::scene::{KeypointSet, Reconstruction, SensorPrior, ViewGraph};
use adasfm_core::synth::{evaluate, generate_scene, GroundTruth, MetricsReport, SceneSpec};
use adasfm_core::{SfmError, Stage};
use serde::de::DeserializeOwned;

use crate::io::{self, load, write_file, IoError};

pub mod files {
    pub const GRAPH: &str = "graph.txt";
    pub const KEYPOINTS: &str = "keypoints.txt";
    pub const PRIORS: &str = "priors.txt";
    pub const TRUTH: &str = "truth.txt";
    pub const SCENE_SPEC: &str = "scene.toml";
    pub const CONFIG: &str = "config.toml";
    pub const GLOBAL: &str = "global.txt";
    pub const GLOBAL_GRAPH: &str = "global_graph.txt";
    pub const GLOBAL_REPORT: &str = "global_report.txt";
    pub const REFINED_GRAPH: &str = "refined_graph.txt";
    pub const REFINE_REPORT: &str = "refine_report.txt";
    pub const PARTITIONS: &str = "partitions.txt";
    pub const LOCAL_REPORT: &str = "local_report.txt";
    pub const ALIGNMENT: &str = "alignment.txt";
    pub const RECONSTRUCTION: &str = "reconstruction.txt";
    pub const POSES: &str = "poses.csv";
    pub const POINTS: &str = "points.ply";
    pub const METRICS: &str = "metrics.txt";
    pub const TIMINGS: &str = "timings.txt";

    pub fn local(k: usize) -> String {
        format!("local_{k}.txt")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage failed: {0}")]
    Stage(SfmError),
    #[error("i/o error: {0}")]
    Io(#[from] IoError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<SfmError> for CliError {
    fn from(e: SfmError) -> Self {
        match e {
            SfmError::InvalidConfig { .. } => CliError::Config(e.to_string()),
            other => CliError::Stage(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonOptions {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub stage_dump: bool,
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = io::read_file(path)?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn to_toml<T: serde::Serialize>(value: &T) -> String {
    toml::to_string(value).expect("configuration types serialize to TOML")
}

/// Reads the pipeline configuration, applies command-line overrides and
/// writes the resolved result to the output directory.
pub fn resolve_config(opts: &CommonOptions) -> CliResult<PipelineConfig> {
    let mut config: PipelineConfig = load_toml(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        config = config.with_seed(seed);
    }
    if opts.workers.is_some() {
        config.workers = opts.workers;
    }
    config.validate()?;
    write_file(&opts.out.join(files::CONFIG), &to_toml(&config))?;
    Ok(config)
}

/// Inputs of a pipeline run.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub graph: ViewGraph,
    pub keypoints: KeypointSet,
    pub priors: Vec<SensorPrior>,
    pub truth: Option<GroundTruth>,
}

pub fn load_scene(dir: &Path) -> CliResult<SceneBundle> {
    let graph = load(&dir.join(files::GRAPH), io::parse_view_graph)?;
    let keypoints = load(&dir.join(files::KEYPOINTS), io::parse_keypoints)?;
    let priors_path = dir.join(files::PRIORS);
    let priors = if priors_path.exists() {
        load(&priors_path, io::parse_priors)?
    } else {
        log::info!("{} not found; running without sensor priors", priors_path.display());
        Vec::new()
    };
    let truth_path = dir.join(files::TRUTH);
    let truth = truth_path.exists().then(|| load(&truth_path, io::parse_truth)).transpose()?;
    Ok(SceneBundle {
        graph,
        keypoints,
        priors,
        truth,
    })
}

/// Generates a synthetic scene and writes its files to `opts.out`.
pub fn synth(opts: &CommonOptions) -> CliResult<()> {
    let mut spec: SceneSpec = load_toml(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let scene = generate_scene(&spec)?;
    if !scene.connected {
        log::warn!("generated view graph is disconnected");
    }
    let out = &opts.out;
    write_file(&out.join(files::SCENE_SPEC), &to_toml(&spec))?;
    write_file(&out.join(files::GRAPH), &io::format_view_graph(&scene.graph))?;
    write_file(&out.join(files::KEYPOINTS), &io::format_keypoints(&scene.keypoints))?;
    write_file(&out.join(files::PRIORS), &io::format_priors(&scene.priors))?;
    write_file(&out.join(files::TRUTH), &io::format_truth(&scene.truth))?;
    log::info!(
        "wrote {} images, {} edges, {} priors to {}",
        scene.graph.num_images(),
        scene.graph.num_edges(),
        scene.priors.len(),
        out.display()
    );
    Ok(())
}

pub fn global(scene: &SceneBundle, config: &PipelineConfig, opts: &CommonOptions) -> CliResult<()> {
    if scene.priors.is_empty() {
        log::info!("no sensor priors; view graph augmentation skipped");
    }
    let out = run_global_sfm(&scene.graph, &scene.priors, &scene.keypoints, &config.global)?;
    let removed = &out.removed_edges;
    let mut report = String::new();
    let _ = writeln!(report, "registered={}", out.reconstruction.num_registered());
    let _ = writeln!(report, "points={}", out.reconstruction.tracks.len());
    let _ = writeln!(report, "removed_edges={}", removed.len());
    let _ = writeln!(report, "refined_edges={}", out.refine.refined);
    let _ = writeln!(report, "degenerate_edges={}", out.refine.degenerate.len());
    let _ = writeln!(report, "sensor_replaced={}", out.augment.replaced.len());
    let _ = writeln!(report, "sensor_inserted={}", out.augment.inserted.len());
    let _ = writeln!(report, "unregistered={}", out.rotation.unregistered.len());
    if opts.stage_dump {
        for (i, j) in removed {
            let _ = writeln!(report, "removed {i} {j}");
        }
        for ((i, j), w) in &out.rotation.edge_weights {
            let _ = writeln!(report, "weight {i} {j} {w}");
        }
        let mut averaged = Reconstruction::new(adasfm_core::scene::Frame::Global);
        averaged.poses = out.averaged.poses.clone();
        write_file(&opts.out.join("global_averaged.txt"), &io::format_reconstruction(&averaged))?;
    }
    write_file(&opts.out.join(files::GLOBAL_REPORT), &report)?;
    write_file(&opts.out.join(files::GLOBAL_GRAPH), &io::format_view_graph(&out.graph))?;
    write_file(&opts.out.join(files::GLOBAL), &io::format_reconstruction(&out.reconstruction))?;
    log::info!("global SfM registered {} images, removed {} edges", out.reconstruction.num_registered(), removed.len());
    Ok(())
}

pub fn refine(scene: &SceneBundle, config: &PipelineConfig, opts: &CommonOptions) -> CliResult<()> {
    let graph = load(&opts.out.join(files::GLOBAL_GRAPH), io::parse_view_graph)?;
    let global = load(&opts.out.join(files::GLOBAL), io::parse_reconstruction)?;
    let (refined, report) = refine_graph(&graph, &global.poses, &scene.keypoints, &config.refine);
    let mut text = String::new();
    let _ = writeln!(text, "removed_matches={}", report.removed_count());
    let _ = writeln!(text, "dropped_edges={}", report.dropped_edges.len());
    let _ = writeln!(text, "skipped_edges={}", report.skipped.len());
    if opts.stage_dump {
        for ((i, j), ms) in &report.removed {
            for (a, b) in ms {
                let _ = writeln!(text, "removed {i} {j} {a} {b}");
            }
        }
    }
    write_file(&opts.out.join(files::REFINE_REPORT), &text)?;
    write_file(&opts.out.join(files::REFINED_GRAPH), &io::format_view_graph(&refined))?;
    log::info!("match refinement removed {} matches", report.removed_count());
    Ok(())
}

pub fn partition(config: &PipelineConfig, opts: &CommonOptions) -> CliResult<()> {
    let graph = load(&opts.out.join(files::REFINED_GRAPH), io::parse_view_graph)?;
    let set = partition_view_graph(&graph, &config.partition).map_err(|e| e.at(Stage::Partition))?;
    write_file(&opts.out.join(files::PARTITIONS), &io::format_partitions(&set))?;
    log::info!("{} partitions, overlap ratio {:.3}", set.partitions.len(), set.overlap_ratio());
    Ok(())
}

pub fn local(scene: &SceneBundle, config: &PipelineConfig, opts: &CommonOptions) -> CliResult<()> {
    let graph = load(&opts.out.join(files::REFINED_GRAPH), io::parse_view_graph)?;
    let set: PartitionSet = load(&opts.out.join(files::PARTITIONS), io::parse_partitions)?;
    let global = load(&opts.out.join(files::GLOBAL), io::parse_reconstruction)?;
    let results = run_local_stage(&graph, &set, &global_priors(&global), &scene.keypoints, &config.local, config.workers)?;
    let mut report = String::new();
    for (k, r) in results.into_iter().enumerate() {
        let path = opts.out.join(files::local(k));
        match r {
            Ok(l) => {
                let _ = writeln!(
                    report,
                    "partition {k} images={} registered={} fallback={} unregistered={}",
                    set.partitions[k].len(),
                    l.reconstruction.num_registered(),
                    l.fallback,
                    l.unregistered.len()
                );
                if opts.stage_dump {
                    for reg in &l.registrations {
                        let _ = writeln!(report, "register {k} {} {:?} {} {}", reg.image, reg.hypothesis, reg.inliers, reg.visible);
                    }
                }
                write_file(&path, &io::format_reconstruction(&l.reconstruction))?;
            }
            Err(e) => {
                log::warn!("partition {k}: {e}");
                let _ = writeln!(report, "partition {k} failed: {e}");
                if path.exists() {
                    std::fs::remove_file(&path).map_err(|source| IoError::File { path: path.clone(), source })?;
                }
            }
        }
    }
    write_file(&opts.out.join(files::LOCAL_REPORT), &report)?;
    Ok(())
}

pub fn align(scene: &SceneBundle, config: &PipelineConfig, opts: &CommonOptions) -> CliResult<Reconstruction> {
    let graph = load(&opts.out.join(files::REFINED_GRAPH), io::parse_view_graph)?;
    let set: PartitionSet = load(&opts.out.join(files::PARTITIONS), io::parse_partitions)?;
    let global = load(&opts.out.join(files::GLOBAL), io::parse_reconstruction)?;
    let mut locals = Vec::with_capacity(set.partitions.len());
    for k in 0..set.partitions.len() {
        let path = opts.out.join(files::local(k));
        locals.push(path.exists().then(|| load(&path, io::parse_reconstruction)).transpose()?);
    }
    let stage = run_align_stage(&locals, &global.poses, &config.align)?;
    let mut recon = stage.merge.reconstruction.clone();
    if config.final_bundle_adjustment {
        final_bundle_adjustment(&mut recon, &graph, &scene.keypoints, config);
    }
    let mut text = String::new();
    let _ = writeln!(text, "residual_scale={}", stage.residual_scale);
    let _ = writeln!(text, "conflicts={}", stage.merge.conflicts.len());
    for (k, a) in stage.alignments.iter().enumerate() {
        match a {
            Some(a) => {
                let taus: Vec<String> = a.tau_trace.iter().map(|t| format!("{t}")).collect();
                let _ = writeln!(
                    text,
                    "partition {k} ratio={} low_confidence={} tau_trace={}",
                    a.inlier_ratio,
                    a.low_confidence,
                    taus.join(",")
                );
            }
            None => {
                let _ = writeln!(text, "partition {k} unaligned");
            }
        }
    }
    if opts.stage_dump {
        for (id, gap) in &stage.merge.duplicate_gaps {
            let _ = writeln!(text, "gap {id} {gap}");
        }
    }
    write_file(&opts.out.join(files::ALIGNMENT), &text)?;
    write_outputs(&recon, &opts.out)?;
    if let Some(truth) = &scene.truth {
        let metrics = evaluate(&recon, truth, &scene.graph, &scene.keypoints);
        write_file(&opts.out.join(files::METRICS), &metrics.to_text())?;
    }
    Ok(recon)
}

fn write_outputs(recon: &Reconstruction, out: &Path) -> CliResult<()> {
    write_file(&out.join(files::RECONSTRUCTION), &io::format_reconstruction(recon))?;
    write_file(&out.join(files::POSES), &io::format_poses_csv(&recon.poses))?;
    write_file(&out.join(files::POINTS), &io::format_points_ply(recon))?;
    Ok(())
}

/// Every stage in order, timing each one.
pub fn pipeline(scene: &SceneBundle, config: &PipelineConfig, opts: &CommonOptions) -> CliResult<Reconstruction> {
    let mut seconds = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, seconds: &mut Vec<(String, f64)>| {
        seconds.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    global(scene, config, opts)?;
    lap("global-sfm", &mut seconds);
    refine(scene, config, opts)?;
    lap("match-refine", &mut seconds);
    partition(config, opts)?;
    lap("partition", &mut seconds);
    local(scene, config, opts)?;
    lap("local-sfm", &mut seconds);
    let recon = align(scene, config, opts)?;
    lap("align-merge", &mut seconds);
    let timings = MetricsReport {
        stage_seconds: seconds,
        ..Default::default()
    };
    let text: String = timings.to_text().lines().filter(|l| l.starts_with("seconds.")).map(|l| format!("{l}\n")).collect();
    write_file(&opts.out.join(files::TIMINGS), &text)?;
    Ok(recon)
}

/// Metrics of a reconstruction file against the scene's ground truth.
pub fn eval(scene: &SceneBundle, reconstruction: &Path, opts: &CommonOptions) -> CliResult<MetricsReport> {
    let truth = scene
        .truth
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("scene has no {}", files::TRUTH)))?;
    let recon = load(reconstruction, io::parse_reconstruction)?;
    let metrics = evaluate(&recon, truth, &scene.graph, &scene.keypoints);
    write_file(&opts.out.join(files::METRICS), &metrics.to_text())?;
    Ok(metrics)
}
