//! Similarity alignment of local reconstructions into the global frame, and merging.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfmError};
use crate::linalg::median;
use crate::scene::{Frame, ImageId, KeypointIndex, Reconstruction, Track};
use crate::{Pose, Rotation, Sim3Transform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub tau_init: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub alpha_inc: f64,
    pub alpha_dec: f64,
    pub max_iterations: usize,
    pub ransac_iterations: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            tau_init: 1.0,
            r_min: 0.7,
            r_max: 0.9,
            alpha_inc: 0.2,
            alpha_dec: 0.1,
            max_iterations: 10,
            ransac_iterations: 256,
            seed: 42,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init > 0.0) {
            return Err(SfmError::config("tau_init", "must be positive"));
        }
        if !(0.0 < self.r_min && self.r_min < self.r_max && self.r_max <= 1.0) {
            return Err(SfmError::config("r_min/r_max", "need 0 < r_min < r_max <= 1"));
        }
        if !(self.alpha_inc > 0.0) {
            return Err(SfmError::config("alpha_inc", "must be positive"));
        }
        if !(self.alpha_dec > 0.0) {
            return Err(SfmError::config("alpha_dec", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(SfmError::config("max_iterations", "must be at least 1"));
        }
        if self.ransac_iterations == 0 {
            return Err(SfmError::config("ransac_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// Relative spread below which a point set counts as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn is_collinear(points: &[Vector3<f64>]) -> bool {
    let c = centroid(points);
    let scatter: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= COLLINEAR_TOL * ev[0]
}

/// Closed-form similarity with `dst ≈ s R src + t` (least squares, Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3Transform> {
    if src.len() != dst.len() {
        return Err(SfmError::InvalidInput("point sets differ in length".into()));
    }
    if src.len() < 3 {
        return Err(SfmError::Insufficient(format!("{} correspondences, need 3", src.len())));
    }
    if is_collinear(src) || is_collinear(dst) {
        return Err(SfmError::Degenerate("collinear correspondences".into()));
    }
    let n = src.len() as f64;
    let mu_s = centroid(src);
    let mu_d = centroid(dst);
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s - mu_s;
        cov += (d - mu_d) * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace_ds: f64 = (0..3).map(|k| svd.singular_values[k] * d[(k, k)]).sum();
    let scale = trace_ds / var_s;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(SfmError::Degenerate("non-positive similarity scale".into()));
    }
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3Transform::new(scale, Rotation::from_matrix_unchecked(rotation), translation))
}

/// RANSAC result: model, inlier mask and ratio.
#[derive(Debug, Clone)]
pub struct Sim3Estimate {
    pub transform: Sim3Transform,
    pub inliers: Vec<bool>,
    pub inlier_ratio: f64,
}

fn inlier_mask(t: &Sim3Transform, pairs: &[(Vector3<f64>, Vector3<f64>)], tau: f64) -> Vec<bool> {
    pairs.iter().map(|(s, d)| (t.apply(s) - d).norm() < tau).collect()
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Minimal-sample RANSAC over `(source, target)` pairs, refit on the best consensus.
pub fn estimate_sim3_ransac(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    tau: f64,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sim3Estimate> {
    let n = pairs.len();
    if n < 3 {
        return Err(SfmError::Insufficient(format!("{n} correspondences, need 3")));
    }
    let mut best: Option<(Sim3Transform, Vec<bool>)> = None;
    for _ in 0..iterations.max(1) {
        let idx = sample(rng, n, 3);
        let src: Vec<_> = idx.iter().map(|k| pairs[k].0).collect();
        let dst: Vec<_> = idx.iter().map(|k| pairs[k].1).collect();
        let Ok(model) = umeyama(&src, &dst) else {
            continue;
        };
        let mask = inlier_mask(&model, pairs, tau);
        if best.as_ref().is_none_or(|(_, m)| count(&mask) > count(m)) {
            best = Some((model, mask));
        }
        if n == 3 {
            break;
        }
    }
    let (mut transform, mut inliers) =
        best.ok_or_else(|| SfmError::Degenerate("every minimal sample was collinear".into()))?;
    if count(&inliers) >= 3 {
        let src: Vec<_> = pairs.iter().zip(&inliers).filter(|(_, &b)| b).map(|(p, _)| p.0).collect();
        let dst: Vec<_> = pairs.iter().zip(&inliers).filter(|(_, &b)| b).map(|(p, _)| p.1).collect();
        if let Ok(refit) = umeyama(&src, &dst) {
            let mask = inlier_mask(&refit, pairs, tau);
            if count(&mask) >= count(&inliers) {
                transform = refit;
                inliers = mask;
            }
        }
    }
    let inlier_ratio = count(&inliers) as f64 / n as f64;
    Ok(Sim3Estimate {
        transform,
        inliers,
        inlier_ratio,
    })
}

/// Scale-and-shift that centers the global cameras and makes the median
/// nearest-neighbour center distance equal to one.
pub fn global_normalization(global: &BTreeMap<ImageId, Pose>) -> Sim3Transform {
    let centers: Vec<Vector3<f64>> = global.values().map(Pose::center).collect();
    if centers.len() < 2 {
        return Sim3Transform::identity();
    }
    let c = centroid(&centers);
    let nn: Vec<f64> = centers
        .iter()
        .enumerate()
        .map(|(a, p)| {
            centers
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let m = median(&nn).unwrap_or(1.0);
    let scale = if m > 0.0 && m.is_finite() { 1.0 / m } else { 1.0 };
    Sim3Transform::new(scale, Rotation::identity(), -c * scale)
}

/// Outcome of the adaptive threshold loop.
#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    /// Maps the local frame into the global frame.
    pub transform: Sim3Transform,
    pub inlier_ratio: f64,
    /// Threshold used at each iteration, in normalized global units.
    pub tau_trace: Vec<f64>,
    pub ratio_trace: Vec<f64>,
    /// Threshold after the loop.
    pub final_tau: f64,
    pub low_confidence: bool,
    /// Center distance of each common image after alignment, in global units.
    pub residuals: BTreeMap<ImageId, f64>,
}

/// Adaptive threshold loop on explicit pairs already in normalized units.
pub fn adaptive_threshold_loop(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    config: &AlignmentConfig,
) -> Result<(Sim3Estimate, Vec<f64>, Vec<f64>, f64, bool)> {
    config.validate()?;
    if pairs.len() < 3 {
        return Err(SfmError::Insufficient(format!("{} common images, need 3", pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tau = config.tau_init;
    let mut ratio = 0.0;
    let mut iter = 0;
    let mut taus = Vec::new();
    let mut ratios = Vec::new();
    let mut last: Option<Sim3Estimate> = None;
    let mut best: Option<Sim3Estimate> = None;
    while ratio < config.r_min && iter < config.max_iterations {
        iter += 1;
        let est = estimate_sim3_ransac(pairs, tau, config.ransac_iterations, &mut rng)?;
        ratio = est.inlier_ratio;
        taus.push(tau);
        ratios.push(ratio);
        if best.as_ref().is_none_or(|b| est.inlier_ratio > b.inlier_ratio) {
            best = Some(est.clone());
        }
        last = Some(est);
        if ratio < config.r_min {
            tau += config.alpha_inc;
        } else if ratio >= config.r_max {
            tau = (tau - config.alpha_dec).max(f64::MIN_POSITIVE);
        }
    }
    let low_confidence = ratio < config.r_min;
    let chosen = if low_confidence { best } else { last };
    Ok((chosen.expect("at least one iteration"), taus, ratios, tau, low_confidence))
}

/// Aligns `local` into the frame of `global` using common camera centers.
pub fn adaptive_align(
    local: &Reconstruction,
    global: &BTreeMap<ImageId, Pose>,
    config: &AlignmentConfig,
) -> Result<AlignmentOutcome> {
    let norm = global_normalization(global);
    let common: Vec<ImageId> = local.poses.keys().filter(|id| global.contains_key(id)).copied().collect();
    let pairs: Vec<_> = common
        .iter()
        .map(|id| (local.poses[id].center(), norm.apply(&global[id].center())))
        .collect();
    let (est, tau_trace, ratio_trace, final_tau, low_confidence) = adaptive_threshold_loop(&pairs, config)?;
    let transform = norm.inverse().compose(&est.transform);
    let residuals = common
        .iter()
        .map(|id| {
            let c = transform.apply(&local.poses[id].center());
            (*id, (c - global[id].center()).norm())
        })
        .collect();
    Ok(AlignmentOutcome {
        transform,
        inlier_ratio: est.inlier_ratio,
        tau_trace,
        ratio_trace,
        final_tau,
        low_confidence,
        residuals,
    })
}

/// Merged model plus duplicate-image diagnostics.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub reconstruction: Reconstruction,
    /// Largest center distance between copies of each image registered more than once.
    pub duplicate_gaps: BTreeMap<ImageId, f64>,
    /// Images whose copies disagree beyond the tolerance.
    pub conflicts: Vec<ImageId>,
    /// Partition that supplied each pose.
    pub pose_source: BTreeMap<ImageId, usize>,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Applies each transform and fuses the reconstructions into one global model.
///
/// `residual_scale` is the median alignment residual; copies of one image that
/// differ by more than five times it are reported as conflicts.
pub fn merge_reconstructions(
    locals: &[Reconstruction],
    transforms: &[Sim3Transform],
    residual_scale: f64,
) -> Result<MergeOutcome> {
    if locals.len() != transforms.len() {
        return Err(SfmError::InvalidInput("one transform per reconstruction required".into()));
    }
    let moved: Vec<Reconstruction> = locals
        .iter()
        .zip(transforms)
        .map(|(r, t)| {
            let mut r = r.clone();
            r.transform(t);
            r
        })
        .collect();

    let mut copies: BTreeMap<ImageId, Vec<(usize, usize)>> = BTreeMap::new();
    for (k, r) in moved.iter().enumerate() {
        let mut obs: HashMap<ImageId, usize> = HashMap::new();
        for t in &r.tracks {
            for o in t.inlier_observations() {
                *obs.entry(o.image).or_default() += 1;
            }
        }
        for &id in r.poses.keys() {
            copies.entry(id).or_default().push((k, obs.get(&id).copied().unwrap_or(0)));
        }
    }

    let mut merged = Reconstruction::new(Frame::Global);
    let mut pose_source = BTreeMap::new();
    let mut duplicate_gaps = BTreeMap::new();
    let mut conflicts = Vec::new();
    let centers: Vec<Vector3<f64>> = moved.iter().flat_map(|r| r.poses.values().map(Pose::center)).collect();
    let spread = if centers.is_empty() {
        1.0
    } else {
        let c = centroid(&centers);
        centers.iter().map(|p| (p - c).norm()).fold(0.0, f64::max).max(1e-300)
    };
    let tolerance = 5.0 * residual_scale.max(1e-9 * spread);
    for (&id, list) in &copies {
        let &(src, _) = list
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty copy list");
        merged.poses.insert(id, moved[src].poses[&id]);
        pose_source.insert(id, src);
        if list.len() > 1 {
            let cs: Vec<_> = list.iter().map(|(k, _)| moved[*k].poses[&id].center()).collect();
            let mut gap: f64 = 0.0;
            for a in 0..cs.len() {
                for b in a + 1..cs.len() {
                    gap = gap.max((cs[a] - cs[b]).norm());
                }
            }
            duplicate_gaps.insert(id, gap);
            if gap > tolerance {
                conflicts.push(id);
            }
        }
    }

    merged.tracks = merge_tracks(moved.iter().flat_map(|r| r.tracks.iter()));
    merged.enforce_registration();
    merged.prune_tracks();
    Ok(MergeOutcome {
        reconstruction: merged,
        duplicate_gaps,
        conflicts,
        pose_source,
    })
}

/// Unions tracks that share an inlier `(image, keypoint)` observation, refusing
/// unions that would put two different keypoints of one image in a track.
fn merge_tracks<'a>(tracks: impl Iterator<Item = &'a Track>) -> Vec<Track> {
    let tracks: Vec<&Track> = tracks.collect();
    let mut ds = DisjointSet::new(tracks.len());
    let mut members: Vec<BTreeMap<ImageId, KeypointIndex>> = tracks
        .iter()
        .map(|t| t.inlier_observations().map(|o| (o.image, o.keypoint)).collect())
        .collect();
    let mut owner: HashMap<(ImageId, KeypointIndex), usize> = HashMap::new();
    for (k, t) in tracks.iter().enumerate() {
        for o in t.inlier_observations() {
            let key = (o.image, o.keypoint);
            match owner.get(&key) {
                None => {
                    owner.insert(key, k);
                }
                Some(&other) => {
                    let a = ds.find(k);
                    let b = ds.find(other);
                    if a == b {
                        continue;
                    }
                    let compatible = members[a]
                        .iter()
                        .all(|(img, kp)| members[b].get(img).is_none_or(|x| x == kp));
                    if compatible {
                        let (keep, gone) = if a < b { (a, b) } else { (b, a) };
                        ds.parent[gone] = keep;
                        let moved = std::mem::take(&mut members[gone]);
                        members[keep].extend(moved);
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..tracks.len() {
        let root = ds.find(k);
        groups.entry(root).or_default().push(k);
    }
    groups
        .into_iter()
        .map(|(root, ids)| {
            let point = ids.iter().map(|&k| tracks[k].point).sum::<Vector3<f64>>() / ids.len() as f64;
            let observations = members[root]
                .iter()
                .map(|(&image, &keypoint)| crate::scene::Observation::new(image, keypoint))
                .collect();
            Track { point, observations }
        })
        .collect()
}
