//! End-to-end orchestration: global SfM, match refinement, partitioning,
//! parallel local SfM, alignment and merging.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{adaptive_align, merge_reconstructions, AlignmentConfig, AlignmentOutcome, MergeOutcome};
use crate::bundle::{bundle_adjust, filter_observations, BundleOptions};
use crate::global_sfm::{run_global_sfm, GlobalSfmConfig, GlobalSfmOutput};
use crate::incremental::{run_local_sfm, LocalSfmConfig, LocalSfmOutput, PriorPoseSet};
use crate::linalg::median;
use crate::match_refine::{refine_graph, MatchRefineConfig, MatchRefineReport};
use crate::partition::{partition_view_graph, PartitionConfig, PartitionSet};
use crate::scene::{Frame, ImageId, KeypointSet, Reconstruction, SensorPrior, ViewGraph};
use crate::{Pose, Result, SfmError, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for the local reconstructions; all cores when unset.
    pub workers: Option<usize>,
    /// Bundle-adjust the merged model once more.
    pub final_bundle_adjustment: bool,
    pub final_ba_iterations: usize,
    pub global: GlobalSfmConfig,
    pub refine: MatchRefineConfig,
    pub partition: PartitionConfig,
    pub local: LocalSfmConfig,
    pub align: AlignmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            workers: None,
            final_bundle_adjustment: true,
            final_ba_iterations: 20,
            global: GlobalSfmConfig::default(),
            refine: MatchRefineConfig::default(),
            partition: PartitionConfig::default(),
            local: LocalSfmConfig::default(),
            align: AlignmentConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Sets the seed of every randomized stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.global.seed = seed;
        self.local.seed = seed;
        self.align.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(SfmError::config("workers", "must be at least 1"));
        }
        if self.final_ba_iterations == 0 {
            return Err(SfmError::config("final_ba_iterations", "must be at least 1"));
        }
        self.global.validate()?;
        self.refine.validate()?;
        self.partition.validate()?;
        self.local.validate()?;
        self.align.validate()
    }
}

/// Local reconstruction of every partition, in parallel on `workers` threads.
pub fn run_local_stage(
    graph: &ViewGraph,
    partitions: &PartitionSet,
    priors: &PriorPoseSet,
    keypoints: &KeypointSet,
    config: &LocalSfmConfig,
    workers: Option<usize>,
) -> Result<Vec<Result<LocalSfmOutput>>> {
    let job = || {
        (0..partitions.partitions.len())
            .into_par_iter()
            .map(|k| {
                let sub = partitions.induced_subgraph(k, graph);
                let local_priors: PriorPoseSet = sub.images().filter_map(|id| Some((id, *priors.get(&id)?))).collect();
                run_local_sfm(&sub, &local_priors, keypoints, config, Frame::Partition(k)).map_err(|e| e.at(Stage::LocalSfm))
            })
            .collect()
    };
    match workers {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| SfmError::InvalidInput(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignStageOutput {
    /// One entry per local reconstruction; `None` when it could not be aligned.
    pub alignments: Vec<Option<AlignmentOutcome>>,
    pub merge: MergeOutcome,
    /// Median center residual over every aligned partition.
    pub residual_scale: f64,
}

/// Aligns every local reconstruction to the global poses and merges them.
pub fn run_align_stage(
    locals: &[Option<Reconstruction>],
    global: &BTreeMap<ImageId, Pose>,
    config: &AlignmentConfig,
) -> Result<AlignStageOutput> {
    let alignments: Vec<Option<AlignmentOutcome>> = locals
        .par_iter()
        .enumerate()
        .map(|(k, r)| {
            let r = r.as_ref()?;
            match adaptive_align(r, global, config) {
                Ok(a) => {
                    if a.low_confidence {
                        log::warn!("partition {k} aligned with low confidence (ratio {:.2})", a.inlier_ratio);
                    }
                    Some(a)
                }
                Err(e) => {
                    log::warn!("partition {k} not aligned: {e}");
                    None
                }
            }
        })
        .collect();
    let mut chosen = Vec::new();
    let mut transforms = Vec::new();
    let mut residuals = Vec::new();
    for (r, a) in locals.iter().zip(&alignments) {
        if let (Some(r), Some(a)) = (r, a) {
            chosen.push(r.clone());
            transforms.push(a.transform);
            residuals.extend(a.residuals.values().copied());
        }
    }
    if chosen.is_empty() {
        return Err(SfmError::Insufficient("no partition could be aligned".into()).at(Stage::Alignment));
    }
    let residual_scale = median(&residuals).unwrap_or(0.0);
    let merge = merge_reconstructions(&chosen, &transforms, residual_scale).map_err(|e| e.at(Stage::Alignment))?;
    if !merge.conflicts.is_empty() {
        log::warn!("{} images disagree across partitions beyond the merge tolerance", merge.conflicts.len());
    }
    Ok(AlignStageOutput {
        alignments,
        merge,
        residual_scale,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub global: GlobalSfmOutput,
    pub refined_graph: ViewGraph,
    pub refine: MatchRefineReport,
    pub partitions: PartitionSet,
    pub locals: Vec<Option<LocalSfmOutput>>,
    pub align: AlignStageOutput,
    pub reconstruction: Reconstruction,
    pub stage_seconds: Vec<(String, f64)>,
}

/// Global poses that seed every local reconstruction.
pub fn global_priors(global: &Reconstruction) -> PriorPoseSet {
    global.poses.clone()
}

/// Optional last bundle adjustment of the merged model.
pub fn final_bundle_adjustment(recon: &mut Reconstruction, graph: &ViewGraph, keypoints: &KeypointSet, config: &PipelineConfig) {
    let options = BundleOptions {
        huber_px: config.global.huber_px,
        max_iterations: config.final_ba_iterations,
        function_tolerance: config.global.ba_function_tolerance,
        ..Default::default()
    };
    let report = bundle_adjust(recon, graph.cameras(), keypoints, &[], &options);
    filter_observations(recon, graph.cameras(), keypoints, config.global.filter_px);
    recon.prune_tracks();
    log::info!("final BA: cost {:.4e} -> {:.4e}", report.initial_cost, report.final_cost);
}

/// Runs every stage in order.
pub fn run_pipeline(
    graph: &ViewGraph,
    priors: &[SensorPrior],
    keypoints: &KeypointSet,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    config.validate()?;
    if priors.is_empty() {
        log::info!("no sensor priors; view graph augmentation skipped");
    }
    let mut stage_seconds = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, out: &mut Vec<(String, f64)>| {
        out.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let global = run_global_sfm(graph, priors, keypoints, &config.global)?;
    log::info!(
        "global SfM: {} images registered, {} edges removed",
        global.reconstruction.num_registered(),
        global.removed_edges.len()
    );
    lap("global-sfm", &mut stage_seconds);

    let (refined_graph, refine) = refine_graph(&global.graph, &global.reconstruction.poses, keypoints, &config.refine);
    log::info!("match refinement removed {} matches", refine.removed_count());
    lap("match-refine", &mut stage_seconds);

    let partitions = partition_view_graph(&refined_graph, &config.partition).map_err(|e| e.at(Stage::Partition))?;
    log::info!("{} partitions, overlap {:.3}", partitions.partitions.len(), partitions.overlap_ratio());
    lap("partition", &mut stage_seconds);

    let priors_global = global_priors(&global.reconstruction);
    let results = run_local_stage(&refined_graph, &partitions, &priors_global, keypoints, &config.local, config.workers)?;
    let locals: Vec<Option<LocalSfmOutput>> = results
        .into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| log::warn!("partition {k}: {e}")).ok())
        .collect();
    lap("local-sfm", &mut stage_seconds);

    let recons: Vec<Option<Reconstruction>> = locals.iter().map(|l| l.as_ref().map(|l| l.reconstruction.clone())).collect();
    let align = run_align_stage(&recons, &global.reconstruction.poses, &config.align)?;
    let mut reconstruction = align.merge.reconstruction.clone();
    if config.final_bundle_adjustment {
        final_bundle_adjustment(&mut reconstruction, &refined_graph, keypoints, config);
    }
    lap("align-merge", &mut stage_seconds);

    Ok(PipelineOutput {
        global,
        refined_graph,
        refine,
        partitions,
        locals,
        align,
        reconstruction,
        stage_seconds,
    })
}

/// Images registered by at least one local reconstruction.
pub fn registered_anywhere(locals: &[Option<Reconstruction>]) -> BTreeSet<ImageId> {
    locals.iter().flatten().flat_map(|r| r.poses.keys().copied()).collect()
}
