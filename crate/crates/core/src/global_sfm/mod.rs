//! Coarse global reconstruction: rotation averaging, edge filtering, direction
//! refinement, sensor augmentation, translation averaging, strict triangulation
//! and iterative normalized bundle adjustment.

mod rotation;
mod translation;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use rotation::{filter_edges_by_rotation, rotation_averaging, rotation_discrepancy, RotationAveragingOptions, RotationSolution};
pub use translation::{translation_averaging, GlobalPoses, TranslationAveragingOptions};

use crate::bundle::{bundle_adjust, filter_observations, normalize_reconstruction, BundleOptions, BundleReport};
use crate::scene::{pair_key, EdgeSource, Frame, ImageId, KeypointIndex, KeypointSet, Reconstruction, SensorPrior, TwoViewEdge, ViewGraph};
use crate::resection::weakly_determined_images;
use crate::triangulation::{build_tracks, collect_views, triangulate_views, TriangulationRule};
use crate::{Camera, Pose, Result, Rotation, SfmError, Sim3Transform, Stage, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalSfmConfig {
    /// Maximum rotation discrepancy of a kept edge, degrees.
    pub rotation_threshold_deg: f64,
    /// Sensor priors with a larger time gap are ignored, milliseconds.
    pub time_gap_ms: f64,
    /// Minimum triangulation angle of a kept track, degrees.
    pub strict_angle_deg: f64,
    /// Matches farther than this from the epipolar plane do not vote on an
    /// edge direction, pixels.
    pub direction_inlier_px: f64,
    /// Observations above this error are dropped during triangulation, pixels.
    pub triangulation_max_error_px: f64,
    pub spanning_trees: usize,
    pub rotation_iterations: usize,
    pub translation_iterations: usize,
    pub translation_tolerance: f64,
    pub ba_outer_iterations: usize,
    pub ba_max_iterations: usize,
    pub ba_function_tolerance: f64,
    pub huber_px: f64,
    pub filter_px: f64,
    /// The BA loop stops once fewer than this fraction of observations is filtered.
    pub filter_stop_fraction: f64,
    /// Keypoint noise assumed when judging whether observations determine a pose, pixels.
    pub pose_noise_px: f64,
    /// Images whose rotation standard deviation from their observations exceeds
    /// this keep their averaged pose during BA, degrees.
    pub max_rotation_std_deg: f64,
    pub seed: u64,
}

impl Default for GlobalSfmConfig {
    fn default() -> Self {
        GlobalSfmConfig {
            rotation_threshold_deg: 5.0,
            time_gap_ms: 500.0,
            strict_angle_deg: 5.0,
            direction_inlier_px: 4.0,
            triangulation_max_error_px: 16.0,
            spanning_trees: 20,
            rotation_iterations: 40,
            translation_iterations: 100,
            translation_tolerance: 1e-8,
            ba_outer_iterations: 5,
            ba_max_iterations: 50,
            ba_function_tolerance: 1e-10,
            huber_px: 4.0,
            filter_px: 4.0,
            filter_stop_fraction: 0.001,
            pose_noise_px: 1.0,
            max_rotation_std_deg: 1.0,
            seed: 42,
        }
    }
}

impl GlobalSfmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rotation_threshold_deg", self.rotation_threshold_deg),
            ("time_gap_ms", self.time_gap_ms),
            ("strict_angle_deg", self.strict_angle_deg),
            ("direction_inlier_px", self.direction_inlier_px),
            ("triangulation_max_error_px", self.triangulation_max_error_px),
            ("translation_tolerance", self.translation_tolerance),
            ("ba_function_tolerance", self.ba_function_tolerance),
            ("huber_px", self.huber_px),
            ("filter_px", self.filter_px),
            ("filter_stop_fraction", self.filter_stop_fraction),
            ("pose_noise_px", self.pose_noise_px),
            ("max_rotation_std_deg", self.max_rotation_std_deg),
        ];
        for (field, v) in positive {
            if !(v > 0.0) {
                return Err(SfmError::config(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("rotation_iterations", self.rotation_iterations),
            ("translation_iterations", self.translation_iterations),
            ("ba_outer_iterations", self.ba_outer_iterations),
            ("ba_max_iterations", self.ba_max_iterations),
        ] {
            if v == 0 {
                return Err(SfmError::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn rotation_options(&self) -> RotationAveragingOptions {
        RotationAveragingOptions {
            spanning_trees: self.spanning_trees,
            max_iterations: self.rotation_iterations,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn translation_options(&self) -> TranslationAveragingOptions {
        TranslationAveragingOptions {
            max_iterations: self.translation_iterations,
            tolerance: self.translation_tolerance,
            ..Default::default()
        }
    }

    pub fn strict_rule(&self) -> TriangulationRule {
        TriangulationRule {
            min_angle: self.strict_angle_deg.to_radians(),
            max_error_px: self.triangulation_max_error_px,
        }
    }

    pub fn bundle_options(&self) -> BundleOptions {
        BundleOptions {
            huber_px: self.huber_px,
            max_iterations: self.ba_max_iterations,
            function_tolerance: self.ba_function_tolerance,
            ..Default::default()
        }
    }
}

const CONSENSUS_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    Refined,
    /// Too few matches; the input direction is kept.
    Unrefined,
    /// No translation signal in the matches; the input direction is kept.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedDirection {
    pub direction: Vector3<f64>,
    pub status: RefineStatus,
}

/// Depths of a match along both rays for relative pose `(R, t)`.
fn two_view_depths(a: &Vector3<f64>, b: &Vector3<f64>, t: &Vector3<f64>) -> Option<(f64, f64)> {
    // Solve lambda * a - mu * b = -t in the least-squares sense.
    let (aa, ab, bb) = (a.dot(a), a.dot(b), b.dot(b));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-15 * aa * bb {
        return None;
    }
    let (at, bt) = (-a.dot(t), -b.dot(t));
    let lambda = (bb * at - ab * bt) / det;
    let mu = (ab * at - aa * bt) / det;
    Some((lambda, -mu))
}

/// Angle between `b` and the epipolar plane spanned by `t` and `a`.
fn epipolar_angle(t: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let m = t.cross(a);
    let denom = m.norm() * b.norm();
    if denom <= 1e-300 {
        return f64::INFINITY;
    }
    (b.dot(&m) / denom).abs()
}

/// Unit null vector of the stacked epipolar rows, or `None` when the rows
/// leave more than one direction unconstrained.
fn null_direction(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Option<Vector3<f64>> {
    let mut ata = Matrix3::<f64>::zeros();
    for (a, b) in rays {
        let row = a.cross(b);
        ata += row * row.transpose();
    }
    let eig = ata.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let (e0, e1) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0));
    if e1 <= 1e-20 * rays.len() as f64 || e0 > 0.25 * e1 {
        return None;
    }
    Some(eig.eigenvectors.column(order[0]).into_owned().normalize())
}

fn consensus(rays: &[(Vector3<f64>, Vector3<f64>)], t: &Vector3<f64>, max_angle: f64) -> Vec<bool> {
    rays.iter().map(|(a, b)| epipolar_angle(t, a, b) < max_angle).collect()
}

/// Re-estimates the unit translation of an edge from its matches with the
/// rotations held fixed. Two-match samples vote for a consensus set, the
/// null vector of the stacked epipolar rows of that set is the direction,
/// and a cheirality vote picks its sign.
pub fn refine_relative_translation(
    edge: &TwoViewEdge,
    ri: &Rotation,
    rj: &Rotation,
    keypoints: &KeypointSet,
    camera_i: &Camera,
    camera_j: &Camera,
    max_error_px: f64,
) -> RefinedDirection {
    let keep = |status| RefinedDirection {
        direction: edge.direction,
        status,
    };
    let rot = *rj * ri.inverse();
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = edge
        .matches
        .iter()
        .filter_map(|&(a, b)| {
            let u = keypoints.normalized(edge.i, a, camera_i)?;
            let v = keypoints.normalized(edge.j, b, camera_j)?;
            Some((rot.rotate(&u), v))
        })
        .collect();
    if rays.len() < 2 {
        return keep(RefineStatus::Unrefined);
    }
    let max_angle = max_error_px / camera_j.fx.min(camera_j.fy);
    let mut rng = ChaCha8Rng::seed_from_u64(((edge.i as u64) << 32) | edge.j as u64);
    let mut best: Option<Vec<bool>> = None;
    let mut best_count = 0;
    for _ in 0..CONSENSUS_SAMPLES.min(rays.len() * (rays.len() - 1) / 2) {
        let idx = sample(&mut rng, rays.len(), 2);
        let (p, q) = (&rays[idx.index(0)], &rays[idx.index(1)]);
        let t = p.0.cross(&p.1).cross(&q.0.cross(&q.1));
        if t.norm() < 1e-12 {
            continue;
        }
        let mask = consensus(&rays, &t.normalize(), max_angle);
        let count = mask.iter().filter(|&&m| m).count();
        if count > best_count {
            best_count = count;
            best = Some(mask);
        }
    }
    let Some(mut mask) = best else {
        return keep(RefineStatus::Degenerate);
    };
    let mut t = Vector3::zeros();
    for _ in 0..2 {
        let inliers: Vec<_> = rays.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| *r).collect();
        if inliers.len() < 2 {
            return keep(RefineStatus::Degenerate);
        }
        let Some(solved) = null_direction(&inliers) else {
            return keep(RefineStatus::Degenerate);
        };
        t = solved;
        mask = consensus(&rays, &t, max_angle);
    }
    let (mut front, mut back) = (0usize, 0usize);
    for ((a, b), _) in rays.iter().zip(&mask).filter(|(_, &m)| m) {
        if let Some((la, lb)) = two_view_depths(a, b, &t) {
            if la > 0.0 && lb > 0.0 {
                front += 1;
            } else if la < 0.0 && lb < 0.0 {
                back += 1;
            }
        }
    }
    if back > front || (back == front && t.dot(&edge.direction) < 0.0) {
        t = -t;
    }
    RefinedDirection {
        direction: t,
        status: RefineStatus::Refined,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineSummary {
    pub refined: usize,
    pub unrefined: Vec<(ImageId, ImageId)>,
    pub degenerate: Vec<(ImageId, ImageId)>,
}

/// Refines every visual edge in parallel. Edges touching an image without a
/// rotation are left untouched.
pub fn refine_translations(
    graph: &ViewGraph,
    rotations: &BTreeMap<ImageId, Rotation>,
    keypoints: &KeypointSet,
    max_error_px: f64,
) -> (ViewGraph, RefineSummary) {
    let edges: Vec<&TwoViewEdge> = graph.edges().filter(|e| e.source == EdgeSource::Visual).collect();
    let results: Vec<((ImageId, ImageId), Option<RefinedDirection>)> = edges
        .par_iter()
        .map(|e| {
            let out = match (rotations.get(&e.i), rotations.get(&e.j), graph.camera(e.i), graph.camera(e.j)) {
                (Some(ri), Some(rj), Some(ci), Some(cj)) => Some(refine_relative_translation(e, ri, rj, keypoints, ci, cj, max_error_px)),
                _ => None,
            };
            (e.key(), out)
        })
        .collect();
    let mut out = graph.clone();
    let mut summary = RefineSummary::default();
    for (key, res) in results {
        let Some(res) = res else { continue };
        match res.status {
            RefineStatus::Refined => {
                summary.refined += 1;
                out.edge_mut(key.0, key.1).expect("edge exists").direction = res.direction;
            }
            RefineStatus::Unrefined => summary.unrefined.push(key),
            RefineStatus::Degenerate => summary.degenerate.push(key),
        }
    }
    (out, summary)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentReport {
    pub replaced: Vec<(ImageId, ImageId)>,
    pub inserted: Vec<(ImageId, ImageId)>,
    /// Priors over the time gate.
    pub ignored: Vec<(ImageId, ImageId)>,
    pub rejected: Vec<((ImageId, ImageId), String)>,
    /// Metric baseline of every accepted prior.
    pub metric: BTreeMap<(ImageId, ImageId), f64>,
}

/// Replaces the translation of consecutive-frame edges with the sensor prior
/// direction, or inserts a sensor edge when the pair has none. Relative
/// rotations of existing edges are kept.
pub fn augment_view_graph(graph: &ViewGraph, priors: &[SensorPrior], time_gap_ms: f64) -> (ViewGraph, AugmentReport) {
    let mut out = graph.clone();
    let mut report = AugmentReport::default();
    for p in priors {
        let key = pair_key(p.i, p.j);
        if let Err(e) = p.validate() {
            report.rejected.push((key, e.to_string()));
            continue;
        }
        if p.i.abs_diff(p.j) != 1 {
            report.rejected.push((key, "images are not consecutive".into()));
            continue;
        }
        if !graph.contains_image(p.i) || !graph.contains_image(p.j) {
            report.rejected.push((key, "image not in view graph".into()));
            continue;
        }
        if p.dt_ms > time_gap_ms {
            report.ignored.push(key);
            continue;
        }
        // Express the prior as i -> j with i < j.
        let (rotation, translation) = if p.i < p.j {
            (p.rotation, p.translation)
        } else {
            let inv = p.rotation.inverse();
            (inv, -inv.rotate(&p.translation))
        };
        let len = translation.norm();
        if !(len > 1e-12) || !len.is_finite() {
            report.rejected.push((key, "zero baseline".into()));
            continue;
        }
        let direction = translation / len;
        match out.edge_mut(key.0, key.1) {
            Some(e) => {
                e.direction = direction;
                e.source = EdgeSource::Sensor;
                report.replaced.push(key);
            }
            None => {
                let e = TwoViewEdge::new(key.0, key.1, rotation, direction, Vec::new(), EdgeSource::Sensor)
                    .expect("validated endpoints");
                out.insert_edge(e).expect("endpoints exist");
                report.inserted.push(key);
            }
        }
        report.metric.insert(key, len);
    }
    (out, report)
}

/// Triangulates one track from registered views, keeping it only when some
/// ray pair is wider than the strict angle and every depth is positive.
pub fn triangulate_track_strict(
    observations: &[(ImageId, KeypointIndex)],
    poses: &BTreeMap<ImageId, Pose>,
    cameras: &BTreeMap<ImageId, Camera>,
    keypoints: &KeypointSet,
    rule: &TriangulationRule,
) -> Option<Track> {
    let views = collect_views(observations, poses, cameras, keypoints);
    if views.len() < 2 {
        return None;
    }
    triangulate_views(&views, rule)
}

#[derive(Debug, Clone)]
pub struct BundleRound {
    pub report: BundleReport,
    pub observations: usize,
    pub filtered: usize,
}

#[derive(Debug, Clone)]
pub struct GlobalBundleReport {
    pub rounds: Vec<BundleRound>,
    /// Composite similarity applied by the per-round normalizations.
    pub normalization: Sim3Transform,
}

fn inlier_observations(recon: &Reconstruction) -> usize {
    recon.tracks.iter().map(Track::inlier_count).sum()
}

/// Alternates bundle adjustment, renormalization and outlier filtering.
pub fn global_bundle_adjust(
    recon: &mut Reconstruction,
    cameras: &BTreeMap<ImageId, Camera>,
    keypoints: &KeypointSet,
    config: &GlobalSfmConfig,
) -> GlobalBundleReport {
    let mut options = config.bundle_options();
    let mut rounds = Vec::new();
    let mut normalization = Sim3Transform::identity();
    for _ in 0..config.ba_outer_iterations {
        options.fixed = weakly_determined_images(recon, cameras, keypoints, config.pose_noise_px, config.max_rotation_std_deg.to_radians());
        if !options.fixed.is_empty() {
            log::debug!("global BA keeps {} weakly observed images fixed", options.fixed.len());
        }
        let report = bundle_adjust(recon, cameras, keypoints, &[], &options);
        let n = normalize_reconstruction(recon);
        normalization = n.compose(&normalization);
        let observations = inlier_observations(recon);
        let filtered = filter_observations(recon, cameras, keypoints, config.filter_px);
        recon.prune_tracks();
        log::debug!("global BA round: cost {:.4e} -> {:.4e}, filtered {filtered}/{observations}", report.initial_cost, report.final_cost);
        rounds.push(BundleRound {
            report,
            observations,
            filtered,
        });
        if (filtered as f64) < config.filter_stop_fraction * observations as f64 {
            break;
        }
    }
    GlobalBundleReport { rounds, normalization }
}

#[derive(Debug, Clone)]
pub struct GlobalSfmOutput {
    /// Poses from translation averaging, before bundle adjustment.
    pub averaged: GlobalPoses,
    /// Bundle-adjusted reconstruction in the normalized global frame.
    pub reconstruction: Reconstruction,
    pub rotation: RotationSolution,
    /// Edges dropped by the rotation-consistency filter.
    pub removed_edges: Vec<(ImageId, ImageId)>,
    /// Filtered, refined and augmented view graph used for translation averaging.
    pub graph: ViewGraph,
    pub refine: RefineSummary,
    pub augment: AugmentReport,
    pub bundle: GlobalBundleReport,
    pub stage_seconds: Vec<(String, f64)>,
}

/// Runs the global pipeline end to end.
pub fn run_global_sfm(
    graph: &ViewGraph,
    priors: &[SensorPrior],
    keypoints: &KeypointSet,
    config: &GlobalSfmConfig,
) -> Result<GlobalSfmOutput> {
    config.validate()?;
    if graph.num_images() == 0 {
        return Err(SfmError::EmptyGraph);
    }
    let mut stage_seconds = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, stage_seconds: &mut Vec<(String, f64)>| {
        stage_seconds.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let rotation = rotation_averaging(graph, &config.rotation_options()).map_err(|e| e.at(Stage::RotationAveraging))?;
    let filtered = filter_edges_by_rotation(graph, &rotation.rotations, config.rotation_threshold_deg.to_radians());
    let removed_edges: Vec<(ImageId, ImageId)> = graph.edges().map(|e| e.key()).filter(|&(i, j)| filtered.edge(i, j).is_none()).collect();
    lap("rotation-averaging", &mut stage_seconds);

    let (refined, refine) = refine_translations(&filtered, &rotation.rotations, keypoints, config.direction_inlier_px);
    lap("translation-refinement", &mut stage_seconds);

    let (augmented, augment) = augment_view_graph(&refined, priors, config.time_gap_ms);
    let averaged = translation_averaging(&augmented, &rotation.rotations, &augment.metric, &config.translation_options())
        .map_err(|e| e.at(Stage::TranslationAveraging))?;
    lap("translation-averaging", &mut stage_seconds);

    let rule = config.strict_rule();
    let cameras = graph.cameras();
    let mut reconstruction = Reconstruction::new(Frame::Global);
    reconstruction.poses = averaged.poses.clone();
    reconstruction.tracks = build_tracks(&augmented)
        .par_iter()
        .filter_map(|obs| triangulate_track_strict(obs, &averaged.poses, cameras, keypoints, &rule))
        .collect();
    if reconstruction.tracks.is_empty() {
        return Err(SfmError::Insufficient("no track passed strict triangulation".into()).at(Stage::Triangulation));
    }
    lap("triangulation", &mut stage_seconds);

    let bundle = global_bundle_adjust(&mut reconstruction, cameras, keypoints, config);
    reconstruction.enforce_registration();
    lap("global-bundle-adjustment", &mut stage_seconds);

    Ok(GlobalSfmOutput {
        averaged,
        reconstruction,
        rotation,
        removed_edges,
        graph: augmented,
        refine,
        augment,
        bundle,
        stage_seconds,
    })
}
