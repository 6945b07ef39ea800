//! Per-partition incremental reconstruction.
//!
//! Images are registered in batches. Every candidate gets two pose hypotheses,
//! one from P3P RANSAC on its 2D-3D correspondences and one composed from the
//! global poses of its co-visible registered neighbours; the hypothesis with
//! more 8 px inliers wins. Bundle adjustment is regularized by the relative
//! rotations and center directions of the global poses.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{bundle_adjust, filter_observations, BundleOptions, BundleReport, PriorEdge};
use crate::geometry::angle_between;
use crate::linalg::median;
use crate::resection::{count_inliers, refine_pose, reprojection_error, rotation_uncertainty, Correspondence};
use crate::scene::{Frame, ImageId, KeypointIndex, KeypointSet, Observation, Reconstruction, TwoViewEdge, ViewGraph};
use crate::triangulation::{build_tracks, collect_views, triangulate_dlt, triangulate_views, TriangulationRule};
use crate::{Camera, Pose, Result, Rotation, SfmError, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSfmConfig {
    pub min_init_matches: usize,
    /// Minimum median triangulation angle of the initial pair, degrees.
    pub min_init_angle_deg: f64,
    /// Images seeing fewer registered points are not candidates.
    pub min_visible_points: usize,
    /// Reprojection threshold of the registration vote and of P3P RANSAC, pixels.
    pub inlier_px: f64,
    pub min_registration_inliers: usize,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    /// Inliers closer than this fraction of the inlier extent to the dominant
    /// line through them count as collinear.
    pub line_tolerance: f64,
    /// A P3P pose needs this many inliers off the dominant line.
    pub min_off_line_inliers: usize,
    /// Keypoint noise assumed when judging how well inliers determine a pose, pixels.
    pub pose_noise_px: f64,
    /// A P3P pose whose rotation standard deviation exceeds this is rejected, degrees.
    pub max_rotation_std_deg: f64,
    /// Minimum inlier fraction of the visible points for registration.
    pub min_inlier_ratio: f64,
    pub max_deferrals: usize,
    pub triangulation_angle_deg: f64,
    pub triangulation_max_error_px: f64,
    pub lambda_rot: f64,
    pub lambda_dir: f64,
    /// Relative growth in registered images that triggers a bundle adjustment.
    pub ba_growth: f64,
    pub periodic_ba_iterations: usize,
    pub final_ba_iterations: usize,
    pub ba_function_tolerance: f64,
    pub huber_px: f64,
    pub filter_px: f64,
    pub median_iterations: usize,
    pub median_tolerance: f64,
    pub seed: u64,
}

impl Default for LocalSfmConfig {
    fn default() -> Self {
        Self {
            min_init_matches: 50,
            min_init_angle_deg: 4.0,
            min_visible_points: 10,
            inlier_px: 8.0,
            min_registration_inliers: 10,
            ransac_max_iterations: 1000,
            ransac_confidence: 0.999,
            line_tolerance: 0.05,
            min_off_line_inliers: 3,
            pose_noise_px: 1.0,
            max_rotation_std_deg: 1.0,
            min_inlier_ratio: 0.25,
            max_deferrals: 3,
            triangulation_angle_deg: 1.5,
            triangulation_max_error_px: 4.0,
            lambda_rot: 10.0,
            lambda_dir: 10.0,
            ba_growth: 0.1,
            periodic_ba_iterations: 10,
            final_ba_iterations: 50,
            ba_function_tolerance: 1e-10,
            huber_px: 4.0,
            filter_px: 4.0,
            median_iterations: 20,
            median_tolerance: 1e-10,
            seed: 42,
        }
    }
}

impl LocalSfmConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("min_init_angle_deg", self.min_init_angle_deg),
            ("inlier_px", self.inlier_px),
            ("triangulation_angle_deg", self.triangulation_angle_deg),
            ("triangulation_max_error_px", self.triangulation_max_error_px),
            ("ba_growth", self.ba_growth),
            ("ba_function_tolerance", self.ba_function_tolerance),
            ("huber_px", self.huber_px),
            ("filter_px", self.filter_px),
            ("median_tolerance", self.median_tolerance),
            ("pose_noise_px", self.pose_noise_px),
            ("max_rotation_std_deg", self.max_rotation_std_deg),
        ] {
            if !(v > 0.0) {
                return Err(SfmError::config(field, "must be positive"));
            }
        }
        for (field, v) in [("lambda_rot", self.lambda_rot), ("lambda_dir", self.lambda_dir), ("line_tolerance", self.line_tolerance)] {
            if !(v >= 0.0) {
                return Err(SfmError::config(field, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) {
            return Err(SfmError::config("min_inlier_ratio", "must lie in [0, 1]"));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(SfmError::config("ransac_confidence", "must lie in (0, 1)"));
        }
        for (field, v) in [
            ("min_visible_points", self.min_visible_points),
            ("min_registration_inliers", self.min_registration_inliers),
            ("ransac_max_iterations", self.ransac_max_iterations),
            ("final_ba_iterations", self.final_ba_iterations),
            ("median_iterations", self.median_iterations),
        ] {
            if v == 0 {
                return Err(SfmError::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn triangulation_rule(&self) -> TriangulationRule {
        TriangulationRule {
            min_angle: self.triangulation_angle_deg.to_radians(),
            max_error_px: self.triangulation_max_error_px,
        }
    }

    fn bundle_options(&self, max_iterations: usize, fixed: Option<ImageId>) -> BundleOptions {
        BundleOptions {
            huber_px: self.huber_px,
            max_iterations,
            function_tolerance: self.ba_function_tolerance,
            fixed: fixed.into_iter().collect(),
            ..Default::default()
        }
    }
}

/// Global poses used as registration hypotheses and BA supervision.
pub type PriorPoseSet = BTreeMap<ImageId, Pose>;

/// Which hypothesis registered an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    P3p,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationCandidate {
    pub image: ImageId,
    /// Registered 3D points the image observes.
    pub visible: usize,
    pub p3p: Option<Pose>,
    pub prior: Option<Pose>,
    pub p3p_inliers: usize,
    pub prior_inliers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub image: ImageId,
    pub hypothesis: Hypothesis,
    pub inliers: usize,
    pub visible: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegistrationOutcome {
    Registered(Registration),
    Deferred { image: ImageId, deferrals: usize },
    Abandoned(ImageId),
}

/// Score of an edge as the seed pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialPair {
    pub i: ImageId,
    pub j: ImageId,
    pub inliers: usize,
    /// Median triangulation angle of the inliers, radians.
    pub median_angle: f64,
    pub score: f64,
}

/// Two-view triangulation of every match of `edge` under the edge's relative pose.
pub fn score_initial_pair(edge: &TwoViewEdge, keypoints: &KeypointSet, ci: &Camera, cj: &Camera, max_error_px: f64) -> InitialPair {
    let pi = Pose::identity();
    let pj = Pose::new(edge.rotation, edge.direction);
    let mut angles = Vec::new();
    for &(ki, kj) in &edge.matches {
        let (Some(ui), Some(uj)) = (keypoints.get(edge.i, ki), keypoints.get(edge.j, kj)) else {
            continue;
        };
        let Some(x) = triangulate_dlt(&[(pi, ci.normalize(ui)), (pj, cj.normalize(uj))]) else {
            continue;
        };
        let ok = [(&pi, ci, ui), (&pj, cj, uj)].iter().all(|(p, c, u)| {
            let xc = p.transform(&x);
            xc.z > 1e-9 && (c.pixel_of(&xc) - *u).norm() < max_error_px
        });
        if ok {
            angles.push(angle_between(&(x - pi.center()), &(x - pj.center())));
        }
    }
    let median_angle = median(&angles).unwrap_or(0.0);
    InitialPair {
        i: edge.i,
        j: edge.j,
        inliers: angles.len(),
        median_angle,
        score: angles.len() as f64 * median_angle,
    }
}

/// Pose `[R | t]` with `P = R X + t` from three world points and their unit bearings.
///
/// Grunert's quartic in the depth ratios, solved through its companion matrix.
pub fn p3p(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let f: Vec<Vector3<f64>> = bearings.iter().map(|b| b.normalize()).collect();
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if a2 <= 0.0 || b2 <= 0.0 || c2 <= 0.0 {
        return Vec::new();
    }
    let (ca, cb, cg) = (f[1].dot(&f[2]), f[0].dot(&f[2]), f[0].dot(&f[1]));
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca - 4.0 * apc * ca * cb * cg + 2.0 * bma * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let mut poses = Vec::new();
    for v in quartic_real_roots(&coeffs) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((amc - 1.0) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let q = 1.0 + v * v - 2.0 * v * cb;
        if !(q > 0.0) {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let depths = [s1, u * s1, v * s1];
        if depths.iter().any(|d| !(*d > 0.0)) {
            continue;
        }
        let cam: Vec<Vector3<f64>> = f.iter().zip(depths).map(|(b, d)| b * d).collect();
        let residual = ((cam[1] - cam[2]).norm_squared() - a2).abs()
            + ((cam[0] - cam[2]).norm_squared() - b2).abs()
            + ((cam[0] - cam[1]).norm_squared() - c2).abs();
        if residual > 1e-6 * (a2 + b2 + c2) {
            continue;
        }
        if let Some(pose) = rigid_alignment(world, &[cam[0], cam[1], cam[2]]) {
            poses.push(pose);
        }
    }
    poses
}

/// Real roots of `c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]`, polished by Newton steps.
fn quartic_real_roots(c: &[f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() < 1e-14 * scale {
        return Vec::new();
    }
    let mut m = Matrix4::zeros();
    for k in 0..4 {
        m[(0, k)] = -c[k + 1] / c[0];
    }
    for k in 1..4 {
        m[(k, k - 1)] = 1.0;
    }
    let eval = |x: f64| {
        let p = (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
        let dp = ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
        (p, dp)
    };
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..4 {
                let (p, dp) = eval(x);
                if dp.abs() < 1e-300 {
                    break;
                }
                x -= p / dp;
            }
            x
        })
        .collect()
}

/// Rotation and translation with `cam ≈ R world + t`.
fn rigid_alignment(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<Pose> {
    let n = world.len() as f64;
    let mw = world.iter().sum::<Vector3<f64>>() / n;
    let mc = cam.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = world.iter().zip(cam).map(|(w, c)| (c - mc) * (w - mw).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_unchecked(u * d * v_t);
    let t = mc - r.rotate(&mw);
    let pose = Pose::new(r, t);
    pose.is_finite().then_some(pose)
}

/// Number of points farther than `tolerance` times the RMS extent from the line
/// through the most points. Candidate lines pass through point pairs.
fn off_line_count(points: &[Vector3<f64>], tolerance: f64, rng: &mut ChaCha8Rng) -> usize {
    let n = points.len();
    if n < 3 {
        return 0;
    }
    let c = points.iter().sum::<Vector3<f64>>() / n as f64;
    let extent = (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n as f64).sqrt();
    if extent <= 0.0 {
        return 0;
    }
    let tol = tolerance * extent;
    let pairs: Vec<(usize, usize)> = if n * (n - 1) / 2 <= 500 {
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
    } else {
        (0..500)
            .map(|_| {
                let s = sample(rng, n, 2);
                (s.index(0), s.index(1))
            })
            .collect()
    };
    let mut best_on = 0;
    for (a, b) in pairs {
        let d = points[b] - points[a];
        let len = d.norm();
        if len <= tol {
            continue;
        }
        let u = d / len;
        let on = points.iter().filter(|p| (*p - points[a]).cross(&u).norm() <= tol).count();
        best_on = best_on.max(on);
    }
    n - best_on.max(2)
}

/// P3P inside RANSAC with an inlier threshold of `config.inlier_px`, followed by
/// resection on the inliers. `None` when fewer than four points are available,
/// no model reaches four inliers, or the inliers are collinear or otherwise
/// leave the rotation poorly determined.
pub fn estimate_pose_p3p(correspondences: &[Correspondence], camera: &Camera, config: &LocalSfmConfig, seed: u64) -> Option<Pose> {
    let n = correspondences.len();
    if n < 4 {
        return None;
    }
    let bearings: Vec<Vector3<f64>> = correspondences.iter().map(|c| camera.normalize(&c.pixel).normalize()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Pose)> = None;
    let mut needed = config.ransac_max_iterations;
    let mut iter = 0;
    while iter < needed.min(config.ransac_max_iterations) {
        iter += 1;
        let idx = sample(&mut rng, n, 3).into_vec();
        let world = [correspondences[idx[0]].point, correspondences[idx[1]].point, correspondences[idx[2]].point];
        let area = (world[1] - world[0]).cross(&(world[2] - world[0])).norm();
        let longest = [(world[1] - world[0]).norm(), (world[2] - world[0]).norm(), (world[2] - world[1]).norm()]
            .into_iter()
            .fold(0.0, f64::max);
        if area <= 1e-6 * longest * longest {
            continue;
        }
        for pose in p3p(&world, &[bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]]) {
            let count = count_inliers(camera, &pose, correspondences, config.inlier_px);
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, pose));
                let w = count as f64 / n as f64;
                let p_fail = 1.0 - w.powi(3);
                if p_fail <= 0.0 {
                    needed = iter;
                } else if p_fail < 1.0 {
                    needed = ((1.0 - config.ransac_confidence).ln() / p_fail.ln()).ceil() as usize;
                }
            }
        }
    }
    let (count, mut pose) = best?;
    if count < 4 {
        return None;
    }
    for _ in 0..2 {
        let inliers: Vec<Correspondence> =
            correspondences.iter().filter(|c| reprojection_error(camera, &pose, c) < config.inlier_px).copied().collect();
        if inliers.len() < 4 {
            return None;
        }
        pose = refine_pose(camera, &pose, &inliers, 20);
    }
    let inliers: Vec<Correspondence> =
        correspondences.iter().filter(|c| reprojection_error(camera, &pose, c) < config.inlier_px).copied().collect();
    let points: Vec<Vector3<f64>> = inliers.iter().map(|c| c.point).collect();
    if inliers.len() < 4 || off_line_count(&points, config.line_tolerance, &mut rng) < config.min_off_line_inliers {
        return None;
    }
    if rotation_uncertainty(camera, &pose, &inliers, config.pose_noise_px) > config.max_rotation_std_deg.to_radians() {
        return None;
    }
    Some(pose)
}

/// Geodesic L1 mean on SO(3) by Weiszfeld iterations from the chordal mean.
pub fn geodesic_median(rotations: &[Rotation], max_iterations: usize, tolerance: f64) -> Option<Rotation> {
    let first = *rotations.first()?;
    if rotations.iter().all(|r| *r == first) {
        return Some(first);
    }
    let sum: Matrix3<f64> = rotations.iter().map(|r| *r.matrix()).sum();
    let mut s = Rotation::project(&sum);
    for _ in 0..max_iterations {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for r in rotations {
            let v = (*r * s.inverse()).log();
            let d = v.norm();
            if d < 1e-12 {
                continue;
            }
            num += v / d;
            den += 1.0 / d;
        }
        if den == 0.0 {
            break;
        }
        let delta = num / den;
        s = Rotation::exp(&delta) * s;
        if delta.norm() < tolerance {
            break;
        }
    }
    Some(s)
}

/// Pose of image `i` composed from co-visible registered neighbours.
///
/// `neighbors` pairs each neighbour's registered pose with its global pose.
/// Rotation is the geodesic median of `R̂_ki R_k`; translation the
/// per-axis median of `t̂_ki + R̂_ki t_k`.
pub fn pose_from_prior(prior_i: &Pose, neighbors: &[(Pose, Pose)], max_iterations: usize, tolerance: f64) -> Option<Pose> {
    if neighbors.is_empty() {
        return None;
    }
    let mut rotations = Vec::with_capacity(neighbors.len());
    let mut translations = Vec::with_capacity(neighbors.len());
    for (registered, prior_k) in neighbors {
        let r_ki = prior_i.rotation * prior_k.rotation.inverse();
        let t_ki = prior_i.translation - r_ki.rotate(&prior_k.translation);
        rotations.push(r_ki * registered.rotation);
        translations.push(t_ki + r_ki.rotate(&registered.translation));
    }
    let rotation = geodesic_median(&rotations, max_iterations, tolerance)?;
    let mut t = Vector3::zeros();
    for axis in 0..3 {
        let values: Vec<f64> = translations.iter().map(|v| v[axis]).collect();
        t[axis] = median(&values)?;
    }
    Some(Pose::new(rotation, t))
}

/// Prior terms for every edge of `graph` whose images are both registered and
/// covered by `priors`.
pub fn local_prior_edges(graph: &ViewGraph, recon: &Reconstruction, priors: &PriorPoseSet, lambda_rot: f64, lambda_dir: f64) -> Vec<PriorEdge> {
    graph
        .edges()
        .filter(|e| recon.is_registered(e.i) && recon.is_registered(e.j))
        .filter_map(|e| PriorEdge::from_poses(e.i, e.j, priors.get(&e.i)?, priors.get(&e.j)?, lambda_rot, lambda_dir))
        .collect()
}

/// Reprojection plus prior-term bundle adjustment in place.
pub fn local_bundle_adjust_with_priors(
    recon: &mut Reconstruction,
    graph: &ViewGraph,
    keypoints: &KeypointSet,
    priors: &PriorPoseSet,
    options: &BundleOptions,
    lambda_rot: f64,
    lambda_dir: f64,
) -> BundleReport {
    let edges = local_prior_edges(graph, recon, priors, lambda_rot, lambda_dir);
    bundle_adjust(recon, graph.cameras(), keypoints, &edges, options)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSfmOutput {
    pub reconstruction: Reconstruction,
    pub initial_pair: Option<InitialPair>,
    /// Initialization failed and all images were placed at their global poses.
    pub fallback: bool,
    pub registrations: Vec<Registration>,
    /// Registered image count after every registration attempt.
    pub registered_counts: Vec<usize>,
    pub unregistered: Vec<ImageId>,
    pub bundle_reports: Vec<BundleReport>,
}

/// Incremental reconstruction state of one partition.
pub struct LocalSfm<'a> {
    graph: &'a ViewGraph,
    keypoints: &'a KeypointSet,
    priors: &'a PriorPoseSet,
    config: &'a LocalSfmConfig,
    features: Vec<Vec<(ImageId, KeypointIndex)>>,
    features_of: HashMap<ImageId, Vec<usize>>,
    point_of: Vec<Option<usize>>,
    pub recon: Reconstruction,
    deferrals: BTreeMap<ImageId, usize>,
    abandoned: BTreeSet<ImageId>,
    anchor: Option<ImageId>,
}

impl<'a> LocalSfm<'a> {
    pub fn new(graph: &'a ViewGraph, keypoints: &'a KeypointSet, priors: &'a PriorPoseSet, config: &'a LocalSfmConfig, frame: Frame) -> Self {
        let features = build_tracks(graph);
        let mut features_of: HashMap<ImageId, Vec<usize>> = HashMap::new();
        for (f, t) in features.iter().enumerate() {
            for (image, _) in t {
                features_of.entry(*image).or_default().push(f);
            }
        }
        Self {
            graph,
            keypoints,
            priors,
            config,
            point_of: vec![None; features.len()],
            features,
            features_of,
            recon: Reconstruction::new(frame),
            deferrals: BTreeMap::new(),
            abandoned: BTreeSet::new(),
            anchor: None,
        }
    }

    fn camera(&self, image: ImageId) -> &Camera {
        &self.graph.cameras()[&image]
    }

    /// Scores every matched edge and seeds the reconstruction with the best
    /// one passing the match-count and angle gates. The first image sits at the
    /// identity; the baseline takes the length of the global baseline when known.
    pub fn initialize_two_view(&mut self) -> Result<InitialPair> {
        let cfg = self.config;
        let mut best: Option<InitialPair> = None;
        for e in self.graph.edges().filter(|e| !e.matches.is_empty()) {
            let s = score_initial_pair(e, self.keypoints, self.camera(e.i), self.camera(e.j), cfg.triangulation_max_error_px);
            if s.inliers < cfg.min_init_matches || s.median_angle < cfg.min_init_angle_deg.to_radians() {
                continue;
            }
            if best.as_ref().is_none_or(|b| s.score > b.score) {
                best = Some(s);
            }
        }
        let pair = best.ok_or_else(|| SfmError::Insufficient("no edge qualifies as the initial pair".into()))?;
        let edge = self.graph.edge(pair.i, pair.j).expect("scored edge exists");
        let baseline = match (self.priors.get(&pair.i), self.priors.get(&pair.j)) {
            (Some(a), Some(b)) if (a.center() - b.center()).norm() > 0.0 => (a.center() - b.center()).norm(),
            _ => 1.0,
        };
        self.recon.poses.insert(pair.i, Pose::identity());
        self.recon.poses.insert(pair.j, Pose::new(edge.rotation, edge.direction * baseline));
        self.anchor = Some(pair.i);
        self.triangulate_new_points(&[pair.i, pair.j]);
        Ok(pair)
    }

    /// Places every image at its global pose and triangulates all tracks.
    pub fn seed_from_priors(&mut self) {
        let images: Vec<ImageId> = self.graph.images().filter(|id| self.priors.contains_key(id)).collect();
        for id in &images {
            self.recon.poses.insert(*id, self.priors[id]);
        }
        self.anchor = images.first().copied();
        self.triangulate_new_points(&images);
    }

    fn visible_points(&self, image: ImageId) -> Vec<(usize, Correspondence)> {
        let Some(fs) = self.features_of.get(&image) else {
            return Vec::new();
        };
        fs.iter()
            .filter_map(|&f| {
                let t = self.point_of[f]?;
                let &(_, kp) = self.features[f].iter().find(|(im, _)| *im == image)?;
                let pixel = *self.keypoints.get(image, kp)?;
                Some((
                    f,
                    Correspondence {
                        pixel,
                        point: self.recon.tracks[t].point,
                    },
                ))
            })
            .collect()
    }

    /// Unregistered images seeing at least `min_visible_points` registered
    /// points, most visible first.
    pub fn select_next_batch(&self) -> Vec<RegistrationCandidate> {
        let mut batch: Vec<RegistrationCandidate> = self
            .graph
            .images()
            .filter(|id| !self.recon.is_registered(*id) && !self.abandoned.contains(id))
            .map(|image| RegistrationCandidate {
                image,
                visible: self.visible_points(image).len(),
                p3p: None,
                prior: None,
                p3p_inliers: 0,
                prior_inliers: 0,
            })
            .filter(|c| c.visible >= self.config.min_visible_points)
            .collect();
        batch.sort_by(|a, b| b.visible.cmp(&a.visible).then(a.image.cmp(&b.image)));
        batch
    }

    /// Registered images sharing at least one triangulated track with `image`.
    pub fn covisible(&self, image: ImageId) -> BTreeSet<ImageId> {
        let mut out = BTreeSet::new();
        for (f, _) in self.visible_points(image) {
            let t = self.point_of[f].expect("visible points are triangulated");
            for o in self.recon.tracks[t].inlier_observations() {
                if o.image != image && self.recon.is_registered(o.image) {
                    out.insert(o.image);
                }
            }
        }
        out
    }

    pub fn prior_pose(&self, image: ImageId) -> Option<Pose> {
        let prior_i = self.priors.get(&image)?;
        let neighbors: Vec<(Pose, Pose)> = self
            .covisible(image)
            .into_iter()
            .filter_map(|k| Some((self.recon.poses[&k], *self.priors.get(&k)?)))
            .collect();
        pose_from_prior(prior_i, &neighbors, self.config.median_iterations, self.config.median_tolerance)
    }

    /// Fills both hypotheses of `candidate` and their inlier counts.
    pub fn evaluate_candidate(&self, candidate: &mut RegistrationCandidate) {
        let corr: Vec<Correspondence> = self.visible_points(candidate.image).into_iter().map(|(_, c)| c).collect();
        let camera = self.camera(candidate.image);
        let seed = self.config.seed ^ ((candidate.image as u64) << 20) ^ self.deferrals.get(&candidate.image).copied().unwrap_or(0) as u64;
        candidate.visible = corr.len();
        candidate.p3p = estimate_pose_p3p(&corr, camera, self.config, seed);
        candidate.prior = self.prior_pose(candidate.image);
        candidate.p3p_inliers = candidate.p3p.map_or(0, |p| count_inliers(camera, &p, &corr, self.config.inlier_px));
        candidate.prior_inliers = candidate.prior.map_or(0, |p| count_inliers(camera, &p, &corr, self.config.inlier_px));
    }

    /// Registers the hypothesis with more inliers, P3P on ties. Defers the image
    /// when the winner has too few inliers in absolute or relative terms.
    pub fn register_image(&mut self, candidate: &mut RegistrationCandidate) -> RegistrationOutcome {
        self.evaluate_candidate(candidate);
        let choice = match (candidate.p3p, candidate.prior) {
            (Some(_), Some(q)) if candidate.prior_inliers > candidate.p3p_inliers => Some((q, Hypothesis::Prior, candidate.prior_inliers)),
            (Some(p), _) => Some((p, Hypothesis::P3p, candidate.p3p_inliers)),
            (None, Some(q)) => Some((q, Hypothesis::Prior, candidate.prior_inliers)),
            (None, None) => None,
        };
        match choice {
            Some((pose, hypothesis, inliers))
                if inliers >= self.config.min_registration_inliers
                    && inliers as f64 >= self.config.min_inlier_ratio * candidate.visible as f64 =>
            {
                self.recon.poses.insert(candidate.image, pose);
                RegistrationOutcome::Registered(Registration {
                    image: candidate.image,
                    hypothesis,
                    inliers,
                    visible: candidate.visible,
                })
            }
            _ => {
                let count = self.deferrals.entry(candidate.image).or_insert(0);
                *count += 1;
                if *count >= self.config.max_deferrals {
                    self.abandoned.insert(candidate.image);
                    RegistrationOutcome::Abandoned(candidate.image)
                } else {
                    RegistrationOutcome::Deferred {
                        image: candidate.image,
                        deferrals: *count,
                    }
                }
            }
        }
    }

    /// Extends triangulated tracks with observations of `images` and
    /// triangulates tracks that now have two registered views. Returns the
    /// number of new points.
    pub fn triangulate_new_points(&mut self, images: &[ImageId]) -> usize {
        let rule = self.config.triangulation_rule();
        let mut touched: BTreeSet<usize> = BTreeSet::new();
        for im in images {
            if let Some(fs) = self.features_of.get(im) {
                touched.extend(fs.iter().copied());
            }
        }
        let cameras = self.graph.cameras();
        let mut created = 0;
        for f in touched {
            match self.point_of[f] {
                Some(t) => {
                    let track = &mut self.recon.tracks[t];
                    for &(image, kp) in &self.features[f] {
                        if !images.contains(&image) || track.observations.iter().any(|o| o.image == image) {
                            continue;
                        }
                        let Some(pose) = self.recon.poses.get(&image) else { continue };
                        let Some(px) = self.keypoints.get(image, kp) else { continue };
                        let xc = pose.transform(&track.point);
                        let inlier = xc.z > 1e-9 && (cameras[&image].pixel_of(&xc) - px).norm() < rule.max_error_px;
                        track.observations.push(Observation { image, keypoint: kp, inlier });
                    }
                }
                None => {
                    let views = collect_views(&self.features[f], &self.recon.poses, cameras, self.keypoints);
                    if views.len() < 2 {
                        continue;
                    }
                    if let Some(track) = triangulate_views(&views, &rule) {
                        self.point_of[f] = Some(self.recon.tracks.len());
                        self.recon.tracks.push(track);
                        created += 1;
                    }
                }
            }
        }
        created
    }

    /// Prior-regularized bundle adjustment followed by outlier filtering.
    pub fn bundle_adjust(&mut self, max_iterations: usize) -> BundleReport {
        let options = self.config.bundle_options(max_iterations, self.anchor);
        let report = local_bundle_adjust_with_priors(
            &mut self.recon,
            self.graph,
            self.keypoints,
            self.priors,
            &options,
            self.config.lambda_rot,
            self.config.lambda_dir,
        );
        filter_observations(&mut self.recon, self.graph.cameras(), self.keypoints, self.config.filter_px);
        report
    }

    /// Initialization, batched registration with periodic BA and a final BA.
    pub fn run(mut self) -> LocalSfmOutput {
        let mut out = LocalSfmOutput {
            reconstruction: Reconstruction::new(self.recon.frame),
            initial_pair: None,
            fallback: false,
            registrations: Vec::new(),
            registered_counts: Vec::new(),
            unregistered: Vec::new(),
            bundle_reports: Vec::new(),
        };
        if self.graph.num_images() == 1 {
            let id = self.graph.images().next().expect("one image");
            let pose = self.priors.get(&id).copied().unwrap_or_else(Pose::identity);
            self.recon.poses.insert(id, pose);
            out.reconstruction = self.recon;
            return out;
        }
        match self.initialize_two_view() {
            Ok(pair) => out.initial_pair = Some(pair),
            Err(err) => {
                log::warn!("partition {:?}: {err}; seeding from global poses", self.recon.frame);
                out.fallback = true;
                self.seed_from_priors();
            }
        }
        out.registered_counts.push(self.recon.num_registered());
        let mut last_ba = self.recon.num_registered();
        loop {
            let batch = self.select_next_batch();
            if batch.is_empty() {
                break;
            }
            let mut added = Vec::new();
            for mut candidate in batch {
                if let RegistrationOutcome::Registered(reg) = self.register_image(&mut candidate) {
                    out.registrations.push(reg);
                    added.push(reg.image);
                }
                out.registered_counts.push(self.recon.num_registered());
            }
            self.triangulate_new_points(&added);
            let n = self.recon.num_registered();
            if n as f64 >= (last_ba as f64 * (1.0 + self.config.ba_growth)).ceil() {
                out.bundle_reports.push(self.bundle_adjust(self.config.periodic_ba_iterations));
                last_ba = n;
            }
        }
        out.bundle_reports.push(self.bundle_adjust(self.config.final_ba_iterations));
        self.recon.prune_tracks();
        out.unregistered = self.graph.images().filter(|id| !self.recon.is_registered(*id)).collect();
        out.reconstruction = self.recon;
        out
    }
}

/// Incremental reconstruction of one partition in its own gauge.
pub fn run_local_sfm(graph: &ViewGraph, priors: &PriorPoseSet, keypoints: &KeypointSet, config: &LocalSfmConfig, frame: Frame) -> Result<LocalSfmOutput> {
    config.validate()?;
    if graph.num_images() == 0 {
        return Err(SfmError::Insufficient("partition has no images".into()));
    }
    Ok(LocalSfm::new(graph, keypoints, priors, config, frame).run())
}

/// Track points re-triangulated from the given poses; used by tests and tools
/// that rebuild structure for a fixed set of cameras.
pub fn triangulate_all(graph: &ViewGraph, poses: &BTreeMap<ImageId, Pose>, keypoints: &KeypointSet, rule: &TriangulationRule) -> Vec<Track> {
    build_tracks(graph)
        .iter()
        .filter_map(|t| triangulate_views(&collect_views(t, poses, graph.cameras(), keypoints), rule))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::EdgeSource;
    use nalgebra::Vector2;
    use crate::synth::{absolute_trajectory_error, generate_scene, oracles, reprojection_rmse, SceneSpec, Trajectory};
    use rand::{Rng, SeedableRng};

    fn camera() -> Camera {
        Camera::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::from_center(Rotation::exp(&random_vec(rng, 1.0)), &random_vec(rng, 2.0))
    }

    /// Points in front of `pose`, projected exactly.
    fn correspondences(rng: &mut ChaCha8Rng, pose: &Pose, n: usize) -> Vec<Correspondence> {
        let cam = camera();
        let inv = pose.inverse();
        (0..n)
            .map(|_| {
                let xc = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..8.0));
                Correspondence {
                    pixel: cam.pixel_of(&xc),
                    point: inv.transform(&xc),
                }
            })
            .collect()
    }

    fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
        (crate::angular_distance(&a.rotation, &b.rotation), (a.center() - b.center()).norm())
    }

    #[test]
    fn p3p_contains_the_true_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = camera();
        for _ in 0..100 {
            let truth = random_pose(&mut rng);
            let c = correspondences(&mut rng, &truth, 3);
            let world = [c[0].point, c[1].point, c[2].point];
            let bearings = [cam.normalize(&c[0].pixel), cam.normalize(&c[1].pixel), cam.normalize(&c[2].pixel)];
            let sols = p3p(&world, &bearings);
            assert!(!sols.is_empty() && sols.len() <= 4);
            let best = sols.iter().map(|s| pose_error(s, &truth)).map(|(r, c)| r + c).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best {best}");
        }
    }

    #[test]
    fn exact_correspondences_recover_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_pose(&mut rng);
        let c = correspondences(&mut rng, &truth, 40);
        let pose = estimate_pose_p3p(&c, &camera(), &LocalSfmConfig::default(), 0).unwrap();
        let (r, t) = pose_error(&pose, &truth);
        assert!(r < 1e-6 && t < 1e-6, "{r} {t}");
    }

    #[test]
    fn half_corrupted_correspondences_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let truth = random_pose(&mut rng);
            let mut c = correspondences(&mut rng, &truth, 60);
            for k in (0..60).step_by(2) {
                c[k].pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            }
            let pose = estimate_pose_p3p(&c, &camera(), &LocalSfmConfig::default(), trial).unwrap();
            let (r, _) = pose_error(&pose, &truth);
            assert!(r.to_degrees() < 0.1, "rotation error {}", r.to_degrees());
        }
    }

    #[test]
    fn degenerate_point_sets_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_pose(&mut rng);
        let cam = camera();
        let c = correspondences(&mut rng, &truth, 3);
        assert!(estimate_pose_p3p(&c, &cam, &LocalSfmConfig::default(), 0).is_none());
        let inv = truth.inverse();
        let line: Vec<Correspondence> = (0..12)
            .map(|k| {
                let xc = Vector3::new(0.3, -1.0 + 0.2 * k as f64, 5.0);
                Correspondence {
                    pixel: cam.pixel_of(&xc),
                    point: inv.transform(&xc),
                }
            })
            .collect();
        assert!(estimate_pose_p3p(&line[..3], &cam, &LocalSfmConfig::default(), 0).is_none());
        assert!(estimate_pose_p3p(&line, &cam, &LocalSfmConfig::default(), 0).is_none());
    }

    #[test]
    fn single_neighbor_prior_is_exact_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (prior_i, prior_k, reg_k) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
        let pose = pose_from_prior(&prior_i, &[(reg_k, prior_k)], 20, 1e-10).unwrap();
        let expected = prior_i.compose(&prior_k.inverse()).compose(&reg_k);
        let (r, t) = pose_error(&pose, &expected);
        assert!(r < 1e-12 && t < 1e-12);
    }

    #[test]
    fn consistent_priors_recover_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gauge = crate::Sim3Transform::new(1.0, Rotation::exp(&random_vec(&mut rng, 1.0)), random_vec(&mut rng, 3.0));
        let truth_i = random_pose(&mut rng);
        let neighbors: Vec<(Pose, Pose)> = (0..5)
            .map(|_| {
                let p = random_pose(&mut rng);
                (p, gauge.transform_pose(&p))
            })
            .collect();
        let pose = pose_from_prior(&gauge.transform_pose(&truth_i), &neighbors, 20, 1e-10).unwrap();
        let (r, t) = pose_error(&pose, &truth_i);
        assert!(r < 1e-9 && t < 1e-9, "{r} {t}");
    }

    #[test]
    fn one_corrupted_neighbor_is_outvoted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth_i = random_pose(&mut rng);
        let mut neighbors: Vec<(Pose, Pose)> = (0..5)
            .map(|_| {
                let p = random_pose(&mut rng);
                (p, p)
            })
            .collect();
        let axis = random_vec(&mut rng, 1.0).normalize();
        let bad = &mut neighbors[2].1;
        *bad = Pose::new(Rotation::exp(&(axis * 30f64.to_radians())) * bad.rotation, bad.translation + Vector3::new(5.0, -5.0, 5.0));
        let pose = pose_from_prior(&truth_i, &neighbors, 20, 1e-10).unwrap();
        assert!(crate::angular_distance(&pose.rotation, &truth_i.rotation).to_degrees() < 1.0);
        let cands: Vec<Rotation> = neighbors
            .iter()
            .map(|(reg, prior)| truth_i.rotation * prior.rotation.inverse() * reg.rotation)
            .collect();
        let oracle = oracles::geodesic_median_grid(&cands).unwrap();
        assert!(crate::angular_distance(&pose.rotation, &oracle) < 1e-3);
        // Each axis median ignores the single corrupted value.
        let ts: Vec<Vector3<f64>> = neighbors
            .iter()
            .map(|(reg, prior)| {
                let r_ki = truth_i.rotation * prior.rotation.inverse();
                truth_i.translation - r_ki.rotate(&prior.translation) + r_ki.rotate(&reg.translation)
            })
            .collect();
        for axis in 0..3 {
            let mut v: Vec<f64> = ts.iter().map(|t| t[axis]).collect();
            v.sort_by(f64::total_cmp);
            assert_eq!(pose.translation[axis], v[2]);
        }
    }

    #[test]
    fn identical_candidates_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Rotation::exp(&random_vec(&mut rng, 2.0));
        assert_eq!(geodesic_median(&[r; 6], 20, 1e-10).unwrap(), r);
    }

    fn scene(n: usize, trajectory: Trajectory) -> crate::synth::SyntheticScene {
        generate_scene(&SceneSpec {
            trajectory,
            num_cameras: n,
            num_points: 150 * n,
            ..Default::default()
        })
        .unwrap()
    }

    fn truth_track_of(s: &crate::synth::SyntheticScene) -> HashMap<(ImageId, KeypointIndex), usize> {
        let mut m = HashMap::new();
        for (p, t) in s.truth.tracks.iter().enumerate() {
            for &o in t {
                m.insert(o, p);
            }
        }
        m
    }

    #[test]
    fn exact_pair_triangulates_truth() {
        let s = scene(2, Trajectory::Line);
        let cfg = LocalSfmConfig::default();
        let mut sfm = LocalSfm::new(&s.graph, &s.keypoints, &s.truth.poses, &cfg, Frame::Partition(0));
        let pair = sfm.initialize_two_view().unwrap();
        assert_eq!((pair.i, pair.j), (0, 1));
        assert_eq!(sfm.recon.num_registered(), 2);
        assert!(!sfm.recon.tracks.is_empty());
        let frame = s.truth.poses[&0];
        let lookup = truth_track_of(&s);
        for t in &sfm.recon.tracks {
            let o = t.observations[0];
            let truth = frame.transform(&s.truth.points[lookup[&(o.image, o.keypoint)]]);
            assert!((t.point - truth).norm() < 1e-8);
        }
    }

    #[test]
    fn pure_rotation_pair_fails() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pj = Pose::new(Rotation::exp(&Vector3::new(0.0, 0.1, 0.0)), Vector3::zeros());
        let mut kp = KeypointSet::new();
        let (mut ui, mut uj) = (Vec::new(), Vec::new());
        for _ in 0..200 {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..8.0));
            ui.push(cam.pixel_of(&x));
            uj.push(cam.pixel_of(&pj.transform(&x)));
        }
        kp.insert(0, ui);
        kp.insert(1, uj);
        let mut g = ViewGraph::new();
        g.add_image(0, cam);
        g.add_image(1, cam);
        let matches = (0..200).map(|k| (k, k)).collect();
        g.insert_edge(TwoViewEdge::new(0, 1, pj.rotation, Vector3::x(), matches, EdgeSource::Visual).unwrap()).unwrap();
        let priors = PriorPoseSet::new();
        let cfg = LocalSfmConfig::default();
        let mut sfm = LocalSfm::new(&g, &kp, &priors, &cfg, Frame::Partition(0));
        assert!(sfm.initialize_two_view().is_err());
        let out = run_local_sfm(&g, &priors, &kp, &cfg, Frame::Partition(0)).unwrap();
        assert!(out.fallback && out.initial_pair.is_none());
    }

    #[test]
    fn initial_pair_maximizes_exhaustive_score() {
        let s = generate_scene(&SceneSpec {
            trajectory: Trajectory::Line,
            num_cameras: 8,
            num_points: 1200,
            spacing: 1.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = LocalSfmConfig::default();
        let lookup = truth_track_of(&s);
        let mut best: Option<((ImageId, ImageId), f64)> = None;
        for e in s.graph.edges() {
            let (ci, cj) = (s.truth.poses[&e.i].center(), s.truth.poses[&e.j].center());
            let angles: Vec<f64> = e
                .matches
                .iter()
                .map(|&(ki, _)| {
                    let x = s.truth.points[lookup[&(e.i, ki)]];
                    angle_between(&(x - ci), &(x - cj))
                })
                .collect();
            let m = median(&angles).unwrap();
            if angles.len() < cfg.min_init_matches || m < cfg.min_init_angle_deg.to_radians() {
                continue;
            }
            let score = angles.len() as f64 * m;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((e.key(), score));
            }
        }
        let (key, score) = best.expect("some edge qualifies");
        let mut sfm = LocalSfm::new(&s.graph, &s.keypoints, &s.truth.poses, &cfg, Frame::Partition(0));
        let pair = sfm.initialize_two_view().unwrap();
        assert_eq!((pair.i, pair.j), key);
        assert!((pair.score - score).abs() < 1e-6 * score);
    }

    /// Images 0 and 1 see every point; image `2 + k` sees the first `counts[k]`.
    fn star(counts: &[usize]) -> (ViewGraph, KeypointSet, PriorPoseSet, Vec<Vector3<f64>>) {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n_points = 40;
        let points: Vec<Vector3<f64>> = (0..n_points)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(5.0..8.0)))
            .collect();
        let mut poses = PriorPoseSet::new();
        for k in 0..2 + counts.len() {
            let c = Vector3::new(0.4 * k as f64, 0.05 * (k % 2) as f64, 0.0);
            poses.insert(k as ImageId, Pose::from_center(Rotation::exp(&Vector3::new(0.0, 0.02 * k as f64, 0.0)), &c));
        }
        let mut kp = KeypointSet::new();
        let mut g = ViewGraph::new();
        for (&id, pose) in &poses {
            g.add_image(id, cam);
            kp.insert(id, points.iter().map(|x| cam.pixel_of(&pose.transform(x))).collect());
        }
        let visible = |id: ImageId| if id < 2 { n_points } else { counts[id as usize - 2] };
        for (&i, pi) in &poses {
            for (&j, pj) in poses.range(i + 1..) {
                let shared = visible(i).min(visible(j)) as KeypointIndex;
                let rel = crate::relative_pose(pi, pj);
                g.insert_edge(TwoViewEdge::new(i, j, rel.rotation, rel.direction.unwrap(), (0..shared).map(|k| (k, k)).collect(), EdgeSource::Visual).unwrap())
                    .unwrap();
            }
        }
        (g, kp, poses, points)
    }

    #[test]
    fn batch_is_gated_and_sorted() {
        let (g, kp, poses, _) = star(&[15, 30, 12, 9]);
        let cfg = LocalSfmConfig {
            min_init_matches: 20,
            min_init_angle_deg: 2.0,
            ..Default::default()
        };
        let mut sfm = LocalSfm::new(&g, &kp, &poses, &cfg, Frame::Partition(0));
        for id in [0, 1] {
            sfm.recon.poses.insert(id, poses[&id]);
        }
        sfm.triangulate_new_points(&[0, 1]);
        let batch = sfm.select_next_batch();
        let got: Vec<(ImageId, usize)> = batch.iter().map(|c| (c.image, c.visible)).collect();
        assert_eq!(got, vec![(3, 30), (2, 15), (4, 12)]);
        for id in 2..6 {
            sfm.recon.poses.insert(id, poses[&id]);
        }
        assert!(sfm.select_next_batch().is_empty());
    }

    #[test]
    fn exact_candidate_prefers_p3p_on_tie() {
        let (g, kp, poses, _) = star(&[30, 30]);
        let cfg = LocalSfmConfig::default();
        let mut sfm = LocalSfm::new(&g, &kp, &poses, &cfg, Frame::Partition(0));
        for id in [0, 1] {
            sfm.recon.poses.insert(id, poses[&id]);
        }
        sfm.triangulate_new_points(&[0, 1]);
        let mut cand = sfm.select_next_batch().remove(0);
        match sfm.register_image(&mut cand) {
            RegistrationOutcome::Registered(reg) => {
                assert_eq!(reg.hypothesis, Hypothesis::P3p);
                assert_eq!(reg.inliers, reg.visible);
                assert_eq!(cand.p3p_inliers, cand.prior_inliers);
                assert_eq!(reg.inliers, cand.p3p_inliers.max(cand.prior_inliers));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collinear_view_is_rescued_by_prior() {
        let cam = camera();
        let (g, mut kp, poses, points) = star(&[30]);
        // Image 2 keeps correct pixels only for points on one line.
        let line: Vec<Vector3<f64>> = (0..12).map(|k| Vector3::new(0.5, -1.2 + 0.2 * k as f64, 6.0)).collect();
        let mut g = g;
        let mut all_kp: Vec<Vec<Vector2<f64>>> = (0..3).map(|id| kp.image(id).to_vec()).collect();
        let base = points.len() as KeypointIndex;
        for id in 0..3u32 {
            for x in &line {
                all_kp[id as usize].push(cam.pixel_of(&poses[&id].transform(x)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for px in all_kp[2].iter_mut().take(points.len()) {
            *px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        for (id, list) in all_kp.into_iter().enumerate() {
            kp.insert(id as ImageId, list);
        }
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let e = g.edge_mut(i, j).unwrap();
            e.matches.extend((0..line.len() as KeypointIndex).map(|k| (base + k, base + k)));
        }
        let cfg = LocalSfmConfig::default();
        let mut sfm = LocalSfm::new(&g, &kp, &poses, &cfg, Frame::Partition(0));
        for id in [0, 1] {
            sfm.recon.poses.insert(id, poses[&id]);
        }
        sfm.triangulate_new_points(&[0, 1]);
        let mut cand = sfm.select_next_batch().remove(0);
        assert_eq!(cand.image, 2);
        match sfm.register_image(&mut cand) {
            RegistrationOutcome::Registered(reg) => {
                assert_eq!(reg.hypothesis, Hypothesis::Prior);
                assert!(cand.prior_inliers > cand.p3p_inliers);
                assert!(reg.inliers >= line.len());
                let (r, t) = pose_error(&sfm.recon.poses[&2], &poses[&2]);
                assert!(r < 1e-9 && t < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hopeless_candidate_is_deferred_then_abandoned() {
        let (g, mut kp, mut poses, _) = star(&[30]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for px in kp.image_mut(2).iter_mut() {
            *px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        poses.insert(2, Pose::from_center(Rotation::exp(&Vector3::new(0.0, 2.5, 0.0)), &Vector3::new(0.0, 0.0, 20.0)));
        let cfg = LocalSfmConfig::default();
        let mut sfm = LocalSfm::new(&g, &kp, &poses, &cfg, Frame::Partition(0));
        for id in [0, 1] {
            sfm.recon.poses.insert(id, poses[&id]);
        }
        sfm.triangulate_new_points(&[0, 1]);
        let mut outcomes = Vec::new();
        for _ in 0..3 {
            let mut cand = sfm.select_next_batch().remove(0);
            outcomes.push(sfm.register_image(&mut cand));
        }
        assert_eq!(outcomes[0], RegistrationOutcome::Deferred { image: 2, deferrals: 1 });
        assert_eq!(outcomes[1], RegistrationOutcome::Deferred { image: 2, deferrals: 2 });
        assert_eq!(outcomes[2], RegistrationOutcome::Abandoned(2));
        assert!(sfm.select_next_batch().is_empty());
    }

    #[test]
    fn chain_match_becomes_one_track() {
        let (g, kp, poses, points) = star(&[40]);
        let cfg = LocalSfmConfig::default();
        let mut sfm = LocalSfm::new(&g, &kp, &poses, &cfg, Frame::Partition(0));
        sfm.recon.poses.insert(0, poses[&0]);
        sfm.recon.poses.insert(2, poses[&2]);
        assert_eq!(sfm.triangulate_new_points(&[0, 2]), points.len());
        sfm.recon.poses.insert(1, poses[&1]);
        assert_eq!(sfm.triangulate_new_points(&[1]), 0);
        assert_eq!(sfm.recon.tracks.len(), points.len());
        for t in &sfm.recon.tracks {
            assert_eq!(t.inlier_count(), 3);
            let k = t.observations[0].keypoint as usize;
            assert!((t.point - points[k]).norm() < 1e-8);
        }
    }

    #[test]
    fn ground_truth_is_a_fixed_point_of_prior_ba() {
        let s = scene(10, Trajectory::Ring);
        let mut r = Reconstruction::new(Frame::Partition(0));
        r.poses = s.truth.poses.clone();
        r.tracks = triangulate_all(&s.graph, &r.poses, &s.keypoints, &LocalSfmConfig::default().triangulation_rule());
        let before = r.clone();
        let edges = local_prior_edges(&s.graph, &r, &s.truth.poses, 10.0, 10.0);
        assert_eq!(edges.len(), s.graph.num_edges());
        let report = local_bundle_adjust_with_priors(&mut r, &s.graph, &s.keypoints, &s.truth.poses, &BundleOptions::default(), 10.0, 10.0);
        assert!(report.initial_cost < 1e-16);
        for (id, p) in &r.poses {
            let (a, b) = pose_error(p, &before.poses[id]);
            assert!(a < 1e-9 && b < 1e-9);
        }
    }

    #[test]
    fn exact_partition_is_fully_registered() {
        let s = scene(30, Trajectory::Ring);
        let out = run_local_sfm(&s.graph, &s.truth.poses, &s.keypoints, &LocalSfmConfig::default(), Frame::Partition(0)).unwrap();
        assert!(!out.fallback);
        assert!(out.unregistered.is_empty(), "unregistered {:?}", out.unregistered);
        for w in out.registered_counts.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for rep in &out.bundle_reports {
            for w in rep.accepted_costs.windows(2) {
                assert!(w[1] < w[0]);
            }
        }
        let rmse = reprojection_rmse(&out.reconstruction, &s.graph, &s.keypoints).unwrap();
        assert!(rmse < 0.05, "rmse {rmse}");
        let ate = absolute_trajectory_error(&out.reconstruction.poses, &s.truth.poses).unwrap();
        assert!(ate < 1e-3 * s.truth.trajectory_diameter(), "ate {ate}");
    }

    #[test]
    fn late_images_register_in_later_batches() {
        let s = scene(24, Trajectory::Line);
        let out = run_local_sfm(&s.graph, &s.truth.poses, &s.keypoints, &LocalSfmConfig::default(), Frame::Partition(0)).unwrap();
        assert!(out.unregistered.is_empty());
        let pair = out.initial_pair.unwrap();
        let far: Vec<ImageId> = s.graph.images().filter(|id| id.abs_diff(pair.i).min(id.abs_diff(pair.j)) > 6).collect();
        assert!(far.len() >= 5);
        let first_batch_size = out.registrations.iter().take_while(|r| r.image.abs_diff(pair.i) <= 6).count();
        for id in far {
            let pos = out.registrations.iter().position(|r| r.image == id).unwrap();
            assert!(pos >= first_batch_size.min(1));
        }
    }

    #[test]
    fn single_image_partition_keeps_prior() {
        let mut g = ViewGraph::new();
        g.add_image(7, camera());
        let prior = Pose::from_center(Rotation::exp(&Vector3::new(0.1, 0.2, 0.3)), &Vector3::new(1.0, 2.0, 3.0));
        let priors = PriorPoseSet::from([(7, prior)]);
        let out = run_local_sfm(&g, &priors, &KeypointSet::new(), &LocalSfmConfig::default(), Frame::Partition(3)).unwrap();
        assert_eq!(out.reconstruction.poses[&7], prior);
        assert!(out.reconstruction.tracks.is_empty());
    }
}
