//! Synthetic scenes with ground truth, evaluation metrics and small brute-force references.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::align::{estimate_sim3_ransac, umeyama};
use crate::error::{Result, SfmError};
use crate::geometry::{angle_between, project, relative_pose};
use crate::scene::{
    EdgeSource, ImageId, KeypointIndex, KeypointSet, Reconstruction, SensorPrior, TwoViewEdge, ViewGraph,
};
use crate::{Camera, Pose, Rotation, Sim3Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    Ring,
    Line,
    FigureEight,
    RandomWalk,
}

impl Trajectory {
    pub fn as_str(&self) -> &'static str {
        match self {
            Trajectory::Ring => "ring",
            Trajectory::Line => "line",
            Trajectory::FigureEight => "figure-eight",
            Trajectory::RandomWalk => "random-walk",
        }
    }

    fn is_closed(&self) -> bool {
        matches!(self, Trajectory::Ring | Trajectory::FigureEight)
    }
}

impl FromStr for Trajectory {
    type Err = SfmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Trajectory::Ring),
            "line" => Ok(Trajectory::Line),
            "figure-eight" => Ok(Trajectory::FigureEight),
            "random-walk" => Ok(Trajectory::RandomWalk),
            other => Err(SfmError::config("trajectory", format!("unknown shape '{other}'"))),
        }
    }
}

/// Parameters of a synthetic capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub trajectory: Trajectory,
    pub num_cameras: usize,
    pub num_points: usize,
    /// Keypoint noise per axis, pixels.
    pub noise_px: f64,
    pub outlier_match_fraction: f64,
    pub outlier_edge_fraction: f64,
    pub sensor_rotation_noise_deg: f64,
    /// Standard deviation of the metric translation noise relative to its length.
    pub sensor_translation_noise: f64,
    pub sensor_dt_min_ms: f64,
    pub sensor_dt_max_ms: f64,
    /// Noise on the relative rotations stored on visual edges.
    pub edge_rotation_noise_deg: f64,
    /// Noise on the translation directions stored on visual edges.
    pub edge_direction_noise_deg: f64,
    /// Distance between consecutive cameras along the path.
    pub spacing: f64,
    pub min_shared_points: usize,
    pub max_view_angle_deg: f64,
    pub max_range: f64,
    pub orientation_jitter_deg: f64,
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            trajectory: Trajectory::Ring,
            num_cameras: 20,
            num_points: 1500,
            noise_px: 0.0,
            outlier_match_fraction: 0.0,
            outlier_edge_fraction: 0.0,
            sensor_rotation_noise_deg: 0.0,
            sensor_translation_noise: 0.0,
            sensor_dt_min_ms: 100.0,
            sensor_dt_max_ms: 100.0,
            edge_rotation_noise_deg: 0.0,
            edge_direction_noise_deg: 0.0,
            spacing: 0.5,
            min_shared_points: 8,
            max_view_angle_deg: 70.0,
            max_range: 12.0,
            orientation_jitter_deg: 1.0,
            fx: 500.0,
            fy: 500.0,
            width: 640,
            height: 480,
            seed: 42,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("outlier_match_fraction", self.outlier_match_fraction),
            ("outlier_edge_fraction", self.outlier_edge_fraction),
        ];
        for (name, f) in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(SfmError::config(name, format!("{f} is outside [0, 1]")));
            }
        }
        let non_negative = [
            ("noise_px", self.noise_px),
            ("sensor_rotation_noise_deg", self.sensor_rotation_noise_deg),
            ("sensor_translation_noise", self.sensor_translation_noise),
            ("sensor_dt_min_ms", self.sensor_dt_min_ms),
            ("edge_rotation_noise_deg", self.edge_rotation_noise_deg),
            ("edge_direction_noise_deg", self.edge_direction_noise_deg),
            ("orientation_jitter_deg", self.orientation_jitter_deg),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) {
                return Err(SfmError::config(name, format!("{v} must be non-negative")));
            }
        }
        if self.sensor_dt_max_ms < self.sensor_dt_min_ms {
            return Err(SfmError::config("sensor_dt_max_ms", "smaller than sensor_dt_min_ms"));
        }
        if self.num_cameras < 2 {
            return Err(SfmError::config("num_cameras", "need at least 2 cameras"));
        }
        if !(self.spacing > 0.0) || !(self.max_range > 0.0) {
            return Err(SfmError::config("spacing", "spacing and max_range must be positive"));
        }
        if !(self.max_view_angle_deg > 0.0 && self.max_view_angle_deg <= 180.0) {
            return Err(SfmError::config("max_view_angle_deg", "must lie in (0, 180]"));
        }
        self.camera()?;
        Ok(())
    }

    pub fn camera(&self) -> Result<Camera> {
        Camera::new(
            self.fx,
            self.fy,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Ground truth of a generated scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub poses: BTreeMap<ImageId, Pose>,
    pub points: Vec<Vector3<f64>>,
    /// Observations of each true point, aligned with `points`.
    pub tracks: Vec<Vec<(ImageId, KeypointIndex)>>,
    pub outlier_edges: BTreeSet<(ImageId, ImageId)>,
    /// Planted wrong matches `(i, j, keypoint in i, keypoint in j)`.
    pub outlier_matches: BTreeSet<(ImageId, ImageId, KeypointIndex, KeypointIndex)>,
}

impl GroundTruth {
    /// Largest distance between two true camera centers.
    pub fn trajectory_diameter(&self) -> f64 {
        let c: Vec<_> = self.poses.values().map(Pose::center).collect();
        let mut d: f64 = 0.0;
        for a in 0..c.len() {
            for b in a + 1..c.len() {
                d = d.max((c[a] - c[b]).norm());
            }
        }
        d
    }
}

/// Everything a pipeline run consumes, plus the truth it is judged against.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub graph: ViewGraph,
    pub keypoints: KeypointSet,
    pub priors: Vec<SensorPrior>,
    pub truth: GroundTruth,
    pub connected: bool,
}

struct PathSample {
    position: Vector2<f64>,
    tangent: Vector2<f64>,
}

fn curve_point(shape: Trajectory, u: f64) -> Vector2<f64> {
    let theta = std::f64::consts::TAU * u;
    match shape {
        // Clockwise so that the left side of travel faces outward.
        Trajectory::Ring => Vector2::new(theta.cos(), -theta.sin()),
        Trajectory::FigureEight => Vector2::new(theta.cos(), theta.sin() * theta.cos()),
        Trajectory::Line => Vector2::new(u, 0.0),
        Trajectory::RandomWalk => unreachable!("random walks are generated step by step"),
    }
}

/// Samples `count` points at uniform arc length along the unit curve,
/// rescaled so that neighbouring samples are `spacing` apart.
fn sample_path(shape: Trajectory, count: usize, spacing: f64, rng: &mut ChaCha8Rng) -> Vec<PathSample> {
    if shape == Trajectory::RandomWalk {
        let turn = Normal::new(0.0, 8f64.to_radians()).expect("valid normal");
        let mut heading: f64 = 0.0;
        let mut pos = Vector2::zeros();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let tangent = Vector2::new(heading.cos(), heading.sin());
            out.push(PathSample { position: pos, tangent });
            heading += turn.sample(rng);
            pos += Vector2::new(heading.cos(), heading.sin()) * spacing;
        }
        return out;
    }
    let dense = 20_000;
    let pts: Vec<Vector2<f64>> = (0..=dense).map(|k| curve_point(shape, k as f64 / dense as f64)).collect();
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        let last = *cum.last().expect("non-empty");
        cum.push(last + (w[1] - w[0]).norm());
    }
    let total = *cum.last().expect("non-empty");
    let target = if shape.is_closed() {
        spacing * count as f64
    } else {
        spacing * (count.max(2) - 1) as f64
    };
    let scale = target / total;
    let steps = if shape.is_closed() { count } else { count.max(2) - 1 };
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = total * k as f64 / steps as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let span = (cum[seg + 1] - cum[seg]).max(1e-300);
        let f = ((s - cum[seg]) / span).clamp(0.0, 1.0);
        let p = pts[seg] + (pts[seg + 1] - pts[seg]) * f;
        let tangent = (pts[seg + 1] - pts[seg]).normalize();
        out.push(PathSample {
            position: p * scale,
            tangent,
        });
    }
    out
}

fn left_of(t: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(-t.y, t.x, 0.0)
}

/// Camera at `center` looking along `forward` with image-down along world -z.
fn look_pose(center: &Vector3<f64>, forward: &Vector3<f64>) -> Pose {
    let z = forward.normalize();
    let y = Vector3::new(0.0, 0.0, -1.0);
    let y = (y - z * z.dot(&y)).normalize();
    let x = y.cross(&z);
    let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::from_center(Rotation::from_matrix_unchecked(r), center)
}

fn random_rotation_perturbation(rng: &mut ChaCha8Rng, sigma_rad: f64) -> Rotation {
    if sigma_rad <= 0.0 {
        return Rotation::identity();
    }
    let n = Normal::new(0.0, sigma_rad).expect("valid normal");
    Rotation::exp(&Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vector3::from(v)
}

/// Rotation by a uniformly random axis and an angle drawn from `[min, max]` radians.
fn random_large_rotation(rng: &mut ChaCha8Rng, min: f64, max: f64) -> Rotation {
    Rotation::exp(&(random_unit(rng) * rng.random_range(min..=max)))
}

/// Tilts a unit vector by an angle drawn from a normal with the given deviation.
fn perturb_direction(rng: &mut ChaCha8Rng, d: &Vector3<f64>, sigma_rad: f64) -> Vector3<f64> {
    if sigma_rad <= 0.0 {
        return *d;
    }
    let mut axis = d.cross(&random_unit(rng));
    if axis.norm() < 1e-9 {
        axis = d.cross(&Vector3::x());
    }
    let angle = Normal::new(0.0, sigma_rad).expect("valid normal").sample(rng);
    Rotation::exp(&(axis.normalize() * angle)).rotate(d)
}

/// Builds a scene deterministically from `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let camera = spec.camera()?;
    let n = spec.num_cameras;
    let path = sample_path(spec.trajectory, n, spec.spacing, &mut rng);

    let mut poses = BTreeMap::new();
    for (k, s) in path.iter().enumerate() {
        let center = Vector3::new(s.position.x, s.position.y, 0.0);
        let base = look_pose(&center, &left_of(&s.tangent));
        let jitter = random_rotation_perturbation(&mut rng, spec.orientation_jitter_deg.to_radians() / 3f64.sqrt());
        poses.insert(k as ImageId, Pose::from_center(jitter * base.rotation, &center));
    }

    // Points in a band to the left of the path, facing it.
    let mut candidates = Vec::with_capacity(spec.num_points);
    for _ in 0..spec.num_points {
        let s = &path[rng.random_range(0..path.len())];
        let left = left_of(&s.tangent);
        let along = Vector3::new(s.tangent.x, s.tangent.y, 0.0) * rng.random_range(-0.5..0.5) * spec.spacing;
        let offset = rng.random_range(3.0..7.0);
        let height = rng.random_range(-1.2..1.2);
        let p = Vector3::new(s.position.x, s.position.y, height) + left * offset + along;
        candidates.push((p, -left));
    }

    let max_angle = spec.max_view_angle_deg.to_radians();
    let visible = |pose: &Pose, p: &Vector3<f64>, normal: &Vector3<f64>| -> Option<Vector2<f64>> {
        let to_cam = pose.center() - p;
        if to_cam.norm() > spec.max_range || angle_between(normal, &to_cam) > max_angle {
            return None;
        }
        let proj = project(&camera, pose, p);
        if !proj.in_front || pose.transform(p).z < 0.1 || !camera.contains(&proj.pixel) {
            return None;
        }
        Some(proj.pixel)
    };

    let mut points = Vec::new();
    let mut seen: Vec<Vec<(ImageId, Vector2<f64>)>> = Vec::new();
    for (p, normal) in &candidates {
        let obs: Vec<_> = poses
            .iter()
            .filter_map(|(&id, pose)| visible(pose, p, normal).map(|px| (id, px)))
            .collect();
        if obs.len() >= 2 {
            points.push(*p);
            seen.push(obs);
        }
    }

    let noise = if spec.noise_px > 0.0 {
        Some(Normal::new(0.0, spec.noise_px).expect("valid normal"))
    } else {
        None
    };
    let mut keypoints = KeypointSet::new();
    for id in poses.keys() {
        keypoints.insert(*id, Vec::new());
    }
    let mut tracks = Vec::with_capacity(points.len());
    for obs in &seen {
        let mut track = Vec::with_capacity(obs.len());
        for (id, px) in obs {
            let mut u = *px;
            if let Some(noise) = &noise {
                u += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let list = keypoints.image_mut(*id);
            track.push((*id, list.len() as KeypointIndex));
            list.push(u);
        }
        tracks.push(track);
    }

    let mut pair_matches: BTreeMap<(ImageId, ImageId), Vec<(KeypointIndex, KeypointIndex)>> = BTreeMap::new();
    for track in &tracks {
        for a in 0..track.len() {
            for b in a + 1..track.len() {
                let (ia, ka) = track[a];
                let (ib, kb) = track[b];
                let (key, m) = if ia < ib { ((ia, ib), (ka, kb)) } else { ((ib, ia), (kb, ka)) };
                pair_matches.entry(key).or_default().push(m);
            }
        }
    }

    let mut graph = ViewGraph::new();
    for id in poses.keys() {
        graph.add_image(*id, camera);
    }
    let rot_sigma = spec.edge_rotation_noise_deg.to_radians() / 3f64.sqrt();
    let dir_sigma = spec.edge_direction_noise_deg.to_radians();
    for ((i, j), matches) in pair_matches {
        if matches.len() < spec.min_shared_points.max(1) {
            continue;
        }
        let rel = relative_pose(&poses[&i], &poses[&j]);
        let Some(dir) = rel.direction else { continue };
        let rotation = random_rotation_perturbation(&mut rng, rot_sigma) * rel.rotation;
        let direction = perturb_direction(&mut rng, &dir, dir_sigma);
        graph.insert_edge(TwoViewEdge::new(i, j, rotation, direction, matches, EdgeSource::Visual)?)?;
    }

    let mut truth = GroundTruth {
        poses: poses.clone(),
        points,
        tracks,
        ..Default::default()
    };

    let keys: Vec<_> = graph.edges().map(TwoViewEdge::key).collect();
    let n_bad = (spec.outlier_edge_fraction * keys.len() as f64).round() as usize;
    let mut bad: Vec<usize> = sample(&mut rng, keys.len(), n_bad.min(keys.len())).into_vec();
    bad.sort_unstable();
    for idx in bad {
        let (i, j) = keys[idx];
        let corruption = random_large_rotation(&mut rng, 30f64.to_radians(), std::f64::consts::PI);
        let dir = random_unit(&mut rng);
        let e = graph.edge_mut(i, j).expect("edge exists");
        e.rotation = corruption * e.rotation;
        e.direction = dir;
        truth.outlier_edges.insert((i, j));
    }

    if spec.outlier_match_fraction > 0.0 {
        for (i, j) in keys {
            let m = graph.edge(i, j).expect("edge exists").matches.len();
            let n_wrong = (spec.outlier_match_fraction * m as f64).round() as usize;
            let mut which = sample(&mut rng, m, n_wrong.min(m)).into_vec();
            which.sort_unstable();
            for idx in which {
                let u = Vector2::new(
                    rng.random_range(0.0..spec.width as f64),
                    rng.random_range(0.0..spec.height as f64),
                );
                let list = keypoints.image_mut(j);
                let kb = list.len() as KeypointIndex;
                list.push(u);
                let e = graph.edge_mut(i, j).expect("edge exists");
                let ka = e.matches[idx].0;
                e.matches[idx] = (ka, kb);
                truth.outlier_matches.insert((i, j, ka, kb));
            }
        }
    }

    let rot_noise = spec.sensor_rotation_noise_deg.to_radians() / 3f64.sqrt();
    let trans_noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut priors = Vec::new();
    for k in 0..n.saturating_sub(1) {
        let (i, j) = (k as ImageId, k as ImageId + 1);
        let rel = relative_pose(&poses[&i], &poses[&j]);
        let rotation = random_rotation_perturbation(&mut rng, rot_noise) * rel.rotation;
        let len = rel.translation.norm();
        let sigma = spec.sensor_translation_noise * len;
        let translation = rel.translation
            + Vector3::new(trans_noise.sample(&mut rng), trans_noise.sample(&mut rng), trans_noise.sample(&mut rng))
                * sigma;
        let dt_ms = if spec.sensor_dt_max_ms > spec.sensor_dt_min_ms {
            rng.random_range(spec.sensor_dt_min_ms..spec.sensor_dt_max_ms)
        } else {
            spec.sensor_dt_min_ms
        };
        priors.push(SensorPrior {
            i,
            j,
            rotation,
            translation,
            dt_ms,
        });
    }

    let connected = graph.components().len() <= 1;
    Ok(SyntheticScene {
        graph,
        keypoints,
        priors,
        truth,
        connected,
    })
}

/// Replaces every match of each listed image by matches to a vertical row of
/// collinear points placed in front of it. Nearby images also observe the
/// row, so it can be triangulated without the listed image, whose own 2D-3D
/// correspondences then admit no unique pose.
pub fn plant_collinear_views(scene: &mut SyntheticScene, images: &[ImageId], points_per_row: usize, noise_px: f64, seed: u64) -> Result<()> {
    if points_per_row < 2 {
        return Err(SfmError::config("points_per_row", "need at least 2 points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (noise_px > 0.0).then(|| Normal::new(0.0, noise_px).expect("valid normal"));
    let targets: BTreeSet<ImageId> = images.iter().copied().collect();
    for e in scene.graph.edges_mut() {
        if targets.contains(&e.i) || targets.contains(&e.j) {
            e.matches.clear();
        }
    }
    for &target in images {
        let pose = *scene
            .truth
            .poses
            .get(&target)
            .ok_or_else(|| SfmError::InvalidInput(format!("image {target} is not in the scene")))?;
        let forward = pose.rotation.inverse().rotate(&Vector3::z());
        let base = pose.center() + forward * 5.0;
        let row: Vec<Vector3<f64>> = (0..points_per_row)
            .map(|k| base + Vector3::z() * (-1.0 + 2.0 * k as f64 / (points_per_row - 1) as f64))
            .collect();
        let viewers: Vec<ImageId> = scene
            .truth
            .poses
            .keys()
            .copied()
            .filter(|id| id.abs_diff(target) <= 2 && (*id == target || !targets.contains(id)))
            .collect();
        for x in &row {
            let mut track = Vec::new();
            for &id in &viewers {
                let cam = *scene.graph.camera(id).expect("scene image");
                let proj = project(&cam, &scene.truth.poses[&id], x);
                if !proj.in_front || !cam.contains(&proj.pixel) {
                    continue;
                }
                let mut u = proj.pixel;
                if let Some(n) = &noise {
                    u += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
                }
                let list = scene.keypoints.image_mut(id);
                track.push((id, list.len() as KeypointIndex));
                list.push(u);
            }
            if track.len() < 2 {
                continue;
            }
            for a in 0..track.len() {
                for b in a + 1..track.len() {
                    let ((i, ki), (j, kj)) = (track[a], track[b]);
                    if scene.graph.edge(i, j).is_none() {
                        let rel = relative_pose(&scene.truth.poses[&i], &scene.truth.poses[&j]);
                        let dir = rel.direction.ok_or_else(|| SfmError::Degenerate(format!("images {i} and {j} coincide")))?;
                        scene.graph.insert_edge(TwoViewEdge::new(i, j, rel.rotation, dir, Vec::new(), EdgeSource::Visual)?)?;
                    }
                    scene.graph.edge_mut(i, j).expect("edge exists").matches.push((ki, kj));
                }
            }
            scene.truth.points.push(*x);
            scene.truth.tracks.push(track);
        }
    }
    Ok(())
}

/// Poses whose consecutive center steps grow by a factor `1 + rate` per image,
/// with rotations unchanged.
pub fn apply_scale_drift(poses: &BTreeMap<ImageId, Pose>, rate: f64) -> BTreeMap<ImageId, Pose> {
    let mut out = BTreeMap::new();
    let mut prev: Option<(Vector3<f64>, Vector3<f64>)> = None;
    let mut scale = 1.0;
    for (&id, pose) in poses {
        let c = pose.center();
        let drifted = match prev {
            None => c,
            Some((pc, pd)) => {
                scale *= 1.0 + rate;
                pd + (c - pc) * scale
            }
        };
        out.insert(id, Pose::from_center(pose.rotation, &drifted));
        prev = Some((c, drifted));
    }
    out
}

/// Parameters for a bare pose graph (no keypoints) on a jittered circle.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphSpec {
    pub num_cameras: usize,
    /// Each camera links to the next `ring_hops` cameras around the circle.
    pub ring_hops: usize,
    /// Extra random chords as a fraction of the camera count.
    pub chord_fraction: f64,
    pub outlier_fraction: f64,
    pub rotation_noise_deg: f64,
    pub direction_noise_deg: f64,
    pub seed: u64,
}

impl Default for PoseGraphSpec {
    fn default() -> Self {
        Self {
            num_cameras: 20,
            ring_hops: 2,
            chord_fraction: 0.2,
            outlier_fraction: 0.0,
            rotation_noise_deg: 0.0,
            direction_noise_deg: 0.0,
            seed: 7,
        }
    }
}

/// Pose graph with its true poses and the set of corrupted edges.
#[derive(Debug, Clone)]
pub struct PoseGraph {
    pub graph: ViewGraph,
    pub poses: BTreeMap<ImageId, Pose>,
    pub outlier_edges: BTreeSet<(ImageId, ImageId)>,
}

pub fn generate_pose_graph(spec: &PoseGraphSpec) -> Result<PoseGraph> {
    let n = spec.num_cameras;
    if n < 3 {
        return Err(SfmError::config("num_cameras", "need at least 3 cameras"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let camera = Camera::new(500.0, 500.0, 320.0, 240.0, 640, 480)?;
    let radius = 10.0;
    let mut poses = BTreeMap::new();
    let mut graph = ViewGraph::new();
    for k in 0..n {
        let a = std::f64::consts::TAU * k as f64 / n as f64;
        let jitter = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let center = Vector3::new(radius * a.cos(), radius * a.sin(), 0.0) + jitter;
        let rotation = Rotation::exp(&(random_unit(&mut rng) * rng.random_range(0.0..std::f64::consts::PI)));
        poses.insert(k as ImageId, Pose::from_center(rotation, &center));
        graph.add_image(k as ImageId, camera);
    }
    let mut pairs = BTreeSet::new();
    for k in 0..n {
        for h in 1..=spec.ring_hops.min(n / 2) {
            let (a, b) = (k, (k + h) % n);
            pairs.insert((a.min(b) as ImageId, a.max(b) as ImageId));
        }
    }
    let chords = (spec.chord_fraction * n as f64).round() as usize;
    let mut attempts = 0;
    let target = pairs.len() + chords;
    while pairs.len() < target && attempts < 100 * n {
        attempts += 1;
        let a = rng.random_range(0..n) as ImageId;
        let b = rng.random_range(0..n) as ImageId;
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let rot_sigma = spec.rotation_noise_deg.to_radians() / 3f64.sqrt();
    let dir_sigma = spec.direction_noise_deg.to_radians();
    for &(i, j) in &pairs {
        let rel = relative_pose(&poses[&i], &poses[&j]);
        let dir = rel.direction.ok_or_else(|| SfmError::Degenerate("coincident cameras".into()))?;
        let rotation = random_rotation_perturbation(&mut rng, rot_sigma) * rel.rotation;
        let direction = perturb_direction(&mut rng, &dir, dir_sigma);
        graph.insert_edge(TwoViewEdge::new(i, j, rotation, direction, Vec::new(), EdgeSource::Visual)?)?;
    }
    let keys: Vec<_> = pairs.iter().copied().collect();
    let n_bad = (spec.outlier_fraction * keys.len() as f64).round() as usize;
    let mut outlier_edges = BTreeSet::new();
    let mut bad = sample(&mut rng, keys.len(), n_bad.min(keys.len())).into_vec();
    bad.sort_unstable();
    for idx in bad {
        let (i, j) = keys[idx];
        let corruption = random_large_rotation(&mut rng, 30f64.to_radians(), std::f64::consts::PI);
        let dir = random_unit(&mut rng);
        let e = graph.edge_mut(i, j).expect("edge exists");
        e.rotation = corruption * e.rotation;
        e.direction = dir;
        outlier_edges.insert((i, j));
    }
    Ok(PoseGraph {
        graph,
        poses,
        outlier_edges,
    })
}

/// Table-style metrics for a reconstruction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub num_images: usize,
    pub num_registered: usize,
    pub num_points: usize,
    pub mean_track_length: f64,
    pub rmse_px: Option<f64>,
    pub ate: Option<f64>,
    pub trajectory_diameter: f64,
    pub stage_seconds: Vec<(String, f64)>,
}

impl MetricsReport {
    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.9e}"));
        let mut s = String::new();
        let _ = writeln!(s, "num_images={}", self.num_images);
        let _ = writeln!(s, "num_registered={}", self.num_registered);
        let _ = writeln!(s, "num_points={}", self.num_points);
        let _ = writeln!(s, "mean_track_length={:.9e}", self.mean_track_length);
        let _ = writeln!(s, "rmse_px={}", opt(self.rmse_px));
        let _ = writeln!(s, "ate={}", opt(self.ate));
        let _ = writeln!(s, "trajectory_diameter={:.9e}", self.trajectory_diameter);
        for (stage, secs) in &self.stage_seconds {
            let _ = writeln!(s, "seconds.{stage}={secs:.6}");
        }
        s
    }
}

/// Root-mean-square reprojection error over inlier observations of registered images.
pub fn reprojection_rmse(recon: &Reconstruction, graph: &ViewGraph, keypoints: &KeypointSet) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in &recon.tracks {
        for o in t.inlier_observations() {
            let (Some(pose), Some(cam), Some(u)) =
                (recon.poses.get(&o.image), graph.camera(o.image), keypoints.get(o.image, o.keypoint))
            else {
                continue;
            };
            let p = project(cam, pose, &t.point);
            sum += (p.pixel - u).norm_squared();
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

/// Best-fit similarity from reconstructed to true centers over common images.
pub fn gauge_alignment(
    poses: &BTreeMap<ImageId, Pose>,
    truth: &BTreeMap<ImageId, Pose>,
) -> Result<(Sim3Transform, Vec<ImageId>)> {
    let ids: Vec<ImageId> = poses.keys().filter(|id| truth.contains_key(id)).copied().collect();
    if ids.len() < 3 {
        return Err(SfmError::Insufficient(format!("{} common images, need 3", ids.len())));
    }
    let pairs: Vec<_> = ids.iter().map(|id| (poses[id].center(), truth[id].center())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let est = estimate_sim3_ransac(&pairs, f64::INFINITY, 1, &mut rng)?;
    Ok((est.transform, ids))
}

/// RMS center error after gauge alignment.
pub fn absolute_trajectory_error(poses: &BTreeMap<ImageId, Pose>, truth: &BTreeMap<ImageId, Pose>) -> Option<f64> {
    let (t, ids) = gauge_alignment(poses, truth).ok()?;
    let sum: f64 = ids
        .iter()
        .map(|id| (t.apply(&poses[id].center()) - truth[id].center()).norm_squared())
        .sum();
    Some((sum / ids.len() as f64).sqrt())
}

pub fn evaluate(
    recon: &Reconstruction,
    truth: &GroundTruth,
    graph: &ViewGraph,
    keypoints: &KeypointSet,
) -> MetricsReport {
    let lengths: Vec<usize> = recon.tracks.iter().map(|t| t.inlier_count()).filter(|&l| l > 0).collect();
    let mean_track_length = if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
    };
    MetricsReport {
        num_images: graph.num_images(),
        num_registered: recon.num_registered(),
        num_points: recon.tracks.len(),
        mean_track_length,
        rmse_px: reprojection_rmse(recon, graph, keypoints),
        ate: absolute_trajectory_error(&recon.poses, &truth.poses),
        trajectory_diameter: truth.trajectory_diameter(),
        stage_seconds: Vec::new(),
    }
}

/// Exhaustive references for small instances.
pub mod oracles {
    use super::*;
    use std::collections::VecDeque;

    const MAX_NODES: usize = 10;
    const MAX_PAIRS: usize = 12;

    fn too_large(what: &str, n: usize, limit: usize) -> SfmError {
        SfmError::InvalidInput(format!("{what}: {n} exceeds the oracle limit of {limit}"))
    }

    /// Breadth-first propagation of relative rotations from the smallest id.
    pub fn spanning_tree_rotations(graph: &ViewGraph) -> Result<BTreeMap<ImageId, Rotation>> {
        if graph.num_images() > MAX_NODES {
            return Err(too_large("graph", graph.num_images(), MAX_NODES));
        }
        let root = graph.images().next().ok_or(SfmError::EmptyGraph)?;
        let adj = graph.adjacency();
        let mut out = BTreeMap::from([(root, Rotation::identity())]);
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            for &b in &adj[&a] {
                if out.contains_key(&b) {
                    continue;
                }
                let e = graph.edge(a, b).expect("adjacent");
                let r = if e.i == a {
                    e.rotation * out[&a]
                } else {
                    e.rotation.inverse() * out[&a]
                };
                out.insert(b, r);
                queue.push_back(b);
            }
        }
        Ok(out)
    }

    /// Largest consensus over every 3-subset, refit on its inliers.
    pub fn exhaustive_sim3_consensus(
        pairs: &[(Vector3<f64>, Vector3<f64>)],
        tau: f64,
    ) -> Result<(Sim3Transform, Vec<bool>)> {
        let n = pairs.len();
        if n > MAX_PAIRS {
            return Err(too_large("pairs", n, MAX_PAIRS));
        }
        let mut best: Option<Vec<bool>> = None;
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    let src = [pairs[a].0, pairs[b].0, pairs[c].0];
                    let dst = [pairs[a].1, pairs[b].1, pairs[c].1];
                    let Ok(t) = umeyama(&src, &dst) else { continue };
                    let mask: Vec<bool> = pairs.iter().map(|(s, d)| (t.apply(s) - d).norm() < tau).collect();
                    let count = mask.iter().filter(|x| **x).count();
                    if best.as_ref().is_none_or(|m| count > m.iter().filter(|x| **x).count()) {
                        best = Some(mask);
                    }
                }
            }
        }
        let mask = best.ok_or_else(|| SfmError::Degenerate("all triples collinear".into()))?;
        let src: Vec<_> = pairs.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| p.0).collect();
        let dst: Vec<_> = pairs.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| p.1).collect();
        Ok((umeyama(&src, &dst)?, mask))
    }

    /// Centers of a chain from a start point, unit step directions and step lengths.
    pub fn chain_centers(start: &Vector3<f64>, steps: &[(Vector3<f64>, f64)]) -> Result<Vec<Vector3<f64>>> {
        if steps.len() + 1 > MAX_NODES {
            return Err(too_large("chain", steps.len() + 1, MAX_NODES));
        }
        let mut out = vec![*start];
        for (dir, len) in steps {
            let last = *out.last().expect("non-empty");
            out.push(last + dir.normalize() * *len);
        }
        Ok(out)
    }

    /// Distance from `q` to the line `l = (a, b, c)` found by projecting onto the
    /// segment between two points lying on it.
    pub fn point_line_distance(l: &Vector3<f64>, q: &Vector2<f64>) -> f64 {
        let (p0, p1) = if l.y.abs() > l.x.abs() {
            (Vector2::new(0.0, -l.z / l.y), Vector2::new(1.0, -(l.z + l.x) / l.y))
        } else {
            (Vector2::new(-l.z / l.x, 0.0), Vector2::new(-(l.z + l.y) / l.x, 1.0))
        };
        let d = p1 - p0;
        let t = (q - p0).dot(&d) / d.norm_squared();
        (p0 + d * t - q).norm()
    }

    /// Geodesic median by coarse-to-fine grid search in the tangent space.
    pub fn geodesic_median_grid(rotations: &[Rotation]) -> Result<Rotation> {
        if rotations.is_empty() {
            return Err(SfmError::Insufficient("no rotations".into()));
        }
        if rotations.len() > MAX_NODES {
            return Err(too_large("rotations", rotations.len(), MAX_NODES));
        }
        let cost = |r: &Rotation| -> f64 { rotations.iter().map(|q| crate::angular_distance(r, q)).sum() };
        let mut best = rotations
            .iter()
            .min_by(|a, b| cost(a).total_cmp(&cost(b)))
            .copied()
            .expect("non-empty");
        let mut step = 0.5;
        while step > 1e-10 {
            let mut improved = true;
            while improved {
                improved = false;
                let base = best;
                let mut best_cost = cost(&base);
                for dx in -2i32..=2 {
                    for dy in -2i32..=2 {
                        for dz in -2i32..=2 {
                            let d = Vector3::new(dx as f64, dy as f64, dz as f64) * step;
                            let cand = Rotation::exp(&d) * base;
                            let c = cost(&cand);
                            if c < best_cost - 1e-15 {
                                best_cost = c;
                                best = cand;
                                improved = true;
                            }
                        }
                    }
                }
            }
            step *= 0.5;
        }
        Ok(best)
    }
}
