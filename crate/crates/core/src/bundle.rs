//! Levenberg-Marquardt bundle adjustment over camera rotations, centers and points,
//! with optional relative-pose prior terms.
//!
//! Cameras are perturbed as `R <- exp(phi) R`, `C <- C + dc`; the reduced camera
//! system is formed by eliminating points and factored with an envelope Cholesky.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Matrix6x3, SMatrix, Vector3, Vector6};

use crate::geometry::{left_jacobian_inverse, relative_pose, right_jacobian_inverse, skew};
use crate::linalg::EnvelopeCholesky;
use crate::scene::{ImageId, KeypointSet, Reconstruction};
use crate::{Camera, Pose, Rotation, Sim3Transform};

#[derive(Debug, Clone, PartialEq)]
pub struct BundleOptions {
    /// Huber scale on the reprojection error norm, pixels.
    pub huber_px: f64,
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Stop once the relative cost decrease of an accepted step falls below this.
    pub function_tolerance: f64,
    /// Images whose poses stay fixed.
    pub fixed: BTreeSet<ImageId>,
    /// Leave all points fixed (pose-only refinement).
    pub fix_points: bool,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            huber_px: 4.0,
            max_iterations: 50,
            initial_lambda: 1e-4,
            function_tolerance: 1e-10,
            fixed: BTreeSet::new(),
            fix_points: false,
        }
    }
}

/// Relative-pose supervision between two images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorEdge {
    pub i: ImageId,
    pub j: ImageId,
    /// Expected `R_j R_i^T`.
    pub rotation: Rotation,
    /// Expected unit relative translation `R_j (C_i - C_j) / |C_i - C_j|`.
    pub direction: Vector3<f64>,
    /// Scale applied to the rotation residual, which is in radians.
    pub lambda_rot: f64,
    /// Scale applied to the direction residual, which is in radians.
    pub lambda_dir: f64,
}

impl PriorEdge {
    /// Prior taken from the relative geometry of two reference poses.
    pub fn from_poses(i: ImageId, j: ImageId, pi: &Pose, pj: &Pose, lambda_rot: f64, lambda_dir: f64) -> Option<Self> {
        let rel = relative_pose(pi, pj);
        Some(Self {
            i,
            j,
            rotation: rel.rotation,
            direction: rel.direction?,
            lambda_rot,
            lambda_dir,
        })
    }
}

/// `log(R̂_ij^T R_j R_i^T)` with its Jacobians on the rotation perturbations of `i` and `j`.
pub fn rotation_prior_residual(ri: &Rotation, rj: &Rotation, expected: &Rotation) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let e = expected.inverse() * *rj * ri.inverse();
    let r = e.log();
    let jj = left_jacobian_inverse(&r) * expected.matrix().transpose();
    let ji = -right_jacobian_inverse(&r);
    (r, ji, jj)
}

/// Angular residual between a unit direction `d` and the vector `a`.
///
/// The residual is `theta / sin(theta) * (d x u)` with `u = a / |a|`, so its
/// norm is the angle between them. Returns the residual and its Jacobian on `a`.
pub fn angle_residual(a: &Vector3<f64>, d: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let len = a.norm();
    if len < 1e-300 {
        return (Vector3::zeros(), Matrix3::zeros());
    }
    let u = a / len;
    let w = d.cross(&u);
    let s = w.norm();
    let c = d.dot(&u);
    let theta = s.atan2(c);
    let dx = skew(d);
    // f = theta / s and g = (df/ds) / s, both smooth at s = 0 when c > 0.
    let (f, g) = if s < 1e-4 && c > 0.0 {
        let s2 = s * s;
        (1.0 + s2 / 6.0 + 3.0 * s2 * s2 / 40.0, -2.0 / 3.0 - s2 / 5.0)
    } else {
        let q = s * s + c * c;
        (theta / s, (c * s / q - theta) / (s * s * s))
    };
    let df_dc = -1.0 / (s * s + c * c);
    let r = w * f;
    // dr/du = f [d]x + w (g w^T [d]x + df/dc d^T)
    let dr_du = dx * f + w * (w.transpose() * dx * g + d.transpose() * df_dc);
    let du_da = (Matrix3::identity() - u * u.transpose()) / len;
    (r, dr_du * du_da)
}

/// Direction prior: angle between `R_j (C_i - C_j)` and the expected unit
/// relative translation `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionResidual {
    pub residual: Vector3<f64>,
    pub d_center_i: Matrix3<f64>,
    pub d_center_j: Matrix3<f64>,
    pub d_rotation_j: Matrix3<f64>,
}

pub fn direction_prior_residual(
    rj: &Rotation,
    ci: &Vector3<f64>,
    cj: &Vector3<f64>,
    d: &Vector3<f64>,
) -> DirectionResidual {
    let a = rj.matrix() * (ci - cj);
    let (r, ja) = angle_residual(&a, d);
    let jc = ja * rj.matrix();
    DirectionResidual {
        residual: r,
        d_center_i: jc,
        d_center_j: -jc,
        d_rotation_j: -ja * skew(&a),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BundleReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

fn huber(e: f64, k: f64) -> f64 {
    if e <= k {
        0.5 * e * e
    } else {
        k * (e - 0.5 * k)
    }
}

fn huber_weight(e: f64, k: f64) -> f64 {
    if e <= k {
        1.0
    } else {
        k / e
    }
}

struct Obs {
    cam: usize,
    var: Option<usize>,
    point: usize,
    pixel: nalgebra::Vector2<f64>,
}

struct Problem<'a> {
    cameras: Vec<Camera>,
    ids: Vec<ImageId>,
    var_of: Vec<Option<usize>>,
    n_var: usize,
    point_var: Vec<Option<usize>>,
    n_points: usize,
    obs: Vec<Obs>,
    priors: Vec<(usize, usize, &'a PriorEdge)>,
    huber: f64,
}

#[derive(Clone)]
struct State {
    rotations: Vec<Rotation>,
    centers: Vec<Vector3<f64>>,
    points: Vec<Vector3<f64>>,
}

impl Problem<'_> {
    fn reprojection(&self, s: &State, o: &Obs) -> Option<(nalgebra::Vector2<f64>, Vector3<f64>)> {
        let xc = s.rotations[o.cam].matrix() * (s.points[o.point] - s.centers[o.cam]);
        if xc.z <= 1e-9 {
            return None;
        }
        let cam = &self.cameras[o.cam];
        let px = nalgebra::Vector2::new(cam.fx * xc.x / xc.z + cam.cx, cam.fy * xc.y / xc.z + cam.cy);
        Some((px - o.pixel, xc))
    }

    fn cost(&self, s: &State) -> f64 {
        let mut total = 0.0;
        for o in &self.obs {
            total += match self.reprojection(s, o) {
                Some((r, _)) => huber(r.norm(), self.huber),
                None => huber(1e6, self.huber),
            };
        }
        for &(a, b, p) in &self.priors {
            let (rr, _, _) = rotation_prior_residual(&s.rotations[a], &s.rotations[b], &p.rotation);
            let rd = direction_prior_residual(&s.rotations[b], &s.centers[a], &s.centers[b], &p.direction).residual;
            total += 0.5 * (p.lambda_rot * p.lambda_rot * rr.norm_squared() + p.lambda_dir * p.lambda_dir * rd.norm_squared());
        }
        total
    }

    fn apply(&self, s: &State, dc: &DVector<f64>, dp: &[Vector3<f64>]) -> State {
        let mut next = s.clone();
        for (cam, var) in self.var_of.iter().enumerate() {
            if let Some(v) = var {
                let phi = Vector3::new(dc[6 * v], dc[6 * v + 1], dc[6 * v + 2]);
                next.rotations[cam] = Rotation::exp(&phi) * s.rotations[cam];
                next.centers[cam] += Vector3::new(dc[6 * v + 3], dc[6 * v + 4], dc[6 * v + 5]);
            }
        }
        for (p, var) in self.point_var.iter().enumerate() {
            if let Some(v) = var {
                next.points[p] += dp[*v];
            }
        }
        next
    }
}

type Mat6 = Matrix6<f64>;

struct Normal {
    u: Vec<Mat6>,
    off: HashMap<(usize, usize), Mat6>,
    gc: Vec<Vector6<f64>>,
    v: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    /// (camera variable, W block) per point variable.
    w: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

fn linearize(pb: &Problem, s: &State) -> Normal {
    let nv = pb.n_var;
    let np = pb.n_points;
    let mut n = Normal {
        u: vec![Mat6::zeros(); nv],
        off: HashMap::new(),
        gc: vec![Vector6::zeros(); nv],
        v: vec![Matrix3::zeros(); np],
        gp: vec![Vector3::zeros(); np],
        w: vec![Vec::new(); np],
    };
    for o in &pb.obs {
        let Some((r, xc)) = pb.reprojection(s, o) else { continue };
        let wgt = huber_weight(r.norm(), pb.huber);
        let cam = &pb.cameras[o.cam];
        let iz = 1.0 / xc.z;
        let jp = Matrix2x3::new(
            cam.fx * iz,
            0.0,
            -cam.fx * xc.x * iz * iz,
            0.0,
            cam.fy * iz,
            -cam.fy * xc.y * iz * iz,
        );
        let rm = *s.rotations[o.cam].matrix();
        let j_point = jp * rm;
        let mut j_cam = SMatrix::<f64, 2, 6>::zeros();
        j_cam.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&xc)));
        j_cam.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-j_point));
        let pv = pb.point_var[o.point];
        if let Some(cv) = o.var {
            n.u[cv] += j_cam.transpose() * j_cam * wgt;
            n.gc[cv] += j_cam.transpose() * r * wgt;
            if let Some(pv) = pv {
                n.w[pv].push((cv, j_cam.transpose() * j_point * wgt));
            }
        }
        if let Some(pv) = pv {
            n.v[pv] += j_point.transpose() * j_point * wgt;
            n.gp[pv] += j_point.transpose() * r * wgt;
        }
    }
    for &(a, b, p) in &pb.priors {
        let (rr, jri, jrj) = rotation_prior_residual(&s.rotations[a], &s.rotations[b], &p.rotation);
        let dir = direction_prior_residual(&s.rotations[b], &s.centers[a], &s.centers[b], &p.direction);
        // Stack both residuals (6 rows) against [phi_i, c_i, phi_j, c_j].
        let mut ja = SMatrix::<f64, 6, 6>::zeros();
        let mut jb = SMatrix::<f64, 6, 6>::zeros();
        let wr = p.lambda_rot;
        let wd = p.lambda_dir;
        ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jri * wr));
        jb.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jrj * wr));
        ja.fixed_view_mut::<3, 3>(3, 3).copy_from(&(dir.d_center_i * wd));
        jb.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dir.d_rotation_j * wd));
        jb.fixed_view_mut::<3, 3>(3, 3).copy_from(&(dir.d_center_j * wd));
        let mut res = Vector6::zeros();
        res.fixed_rows_mut::<3>(0).copy_from(&(rr * wr));
        res.fixed_rows_mut::<3>(3).copy_from(&(dir.residual * wd));
        let (va, vb) = (pb.var_of[a], pb.var_of[b]);
        if let Some(va) = va {
            n.u[va] += ja.transpose() * ja;
            n.gc[va] += ja.transpose() * res;
        }
        if let Some(vb) = vb {
            n.u[vb] += jb.transpose() * jb;
            n.gc[vb] += jb.transpose() * res;
        }
        if let (Some(va), Some(vb)) = (va, vb) {
            let (lo, hi, blk) = if va > vb {
                (vb, va, ja.transpose() * jb)
            } else {
                (va, vb, jb.transpose() * ja)
            };
            // Stored as the (hi, lo) block of the lower triangle.
            *n.off.entry((hi, lo)).or_insert_with(Mat6::zeros) += blk;
        }
    }
    n
}

fn damp3(m: &Matrix3<f64>, lambda: f64) -> Matrix3<f64> {
    let mut d = *m;
    for k in 0..3 {
        d[(k, k)] += lambda * m[(k, k)].clamp(1e-6, 1e32);
    }
    d
}

/// Solves the damped system; `None` when the reduced matrix is not positive definite.
fn solve_step(pb: &Problem, n: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let nv = pb.n_var;
    let dim = 6 * nv;
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    for (c, u) in n.u.iter().enumerate() {
        let mut ud = *u;
        for k in 0..6 {
            ud[(k, k)] += lambda * u[(k, k)].clamp(1e-6, 1e32);
        }
        s.view_mut((6 * c, 6 * c), (6, 6)).copy_from(&ud);
        b.rows_mut(6 * c, 6).copy_from(&(-n.gc[c]));
    }
    for (&(hi, lo), blk) in &n.off {
        let mut view = s.view_mut((6 * hi, 6 * lo), (6, 6));
        view += blk;
    }
    let mut v_inv = Vec::with_capacity(n.v.len());
    for (p, v) in n.v.iter().enumerate() {
        let vi = damp3(v, lambda).try_inverse()?;
        let ws = &n.w[p];
        let wv: Vec<(usize, Matrix6x3<f64>)> = ws.iter().map(|(c, w)| (*c, w * vi)).collect();
        for (ca, wva) in &wv {
            let mut rhs = b.rows_mut(6 * ca, 6);
            rhs += wva * n.gp[p];
            for (cb, wb) in ws {
                if cb <= ca {
                    let mut view = s.view_mut((6 * ca, 6 * cb), (6, 6));
                    view -= wva * wb.transpose();
                }
            }
        }
        v_inv.push(vi);
    }
    // Mirror the lower triangle of the diagonal blocks for the factorization.
    for c in 0..nv {
        for r in 0..6 {
            for q in r + 1..6 {
                s[(6 * c + r, 6 * c + q)] = s[(6 * c + q, 6 * c + r)];
            }
        }
    }
    let dc = if dim > 0 {
        EnvelopeCholesky::factor(&lower_only(s))?.solve(&b)
    } else {
        DVector::zeros(0)
    };
    let dp = (0..n.v.len())
        .map(|p| {
            let mut rhs = -n.gp[p];
            for (c, w) in &n.w[p] {
                rhs -= w.transpose() * dc.rows(6 * c, 6);
            }
            v_inv[p] * rhs
        })
        .collect();
    Some((dc, dp))
}

/// Keeps the lower triangle (the factorization only reads it) and zeroes the rest
/// so the envelope is measured on the lower profile.
fn lower_only(mut s: DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    for i in 0..n {
        for j in i + 1..n {
            s[(i, j)] = 0.0;
        }
    }
    s
}

/// Runs LM in place on `recon`. Only inlier observations of registered images take part.
pub fn bundle_adjust(
    recon: &mut Reconstruction,
    cameras: &BTreeMap<ImageId, Camera>,
    keypoints: &KeypointSet,
    priors: &[PriorEdge],
    options: &BundleOptions,
) -> BundleReport {
    let ids: Vec<ImageId> = recon.poses.keys().copied().collect();
    let index: HashMap<ImageId, usize> = ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let mut var_of = vec![None; ids.len()];
    let mut n_var = 0;
    for (k, id) in ids.iter().enumerate() {
        if !options.fixed.contains(id) {
            var_of[k] = Some(n_var);
            n_var += 1;
        }
    }
    let mut obs = Vec::new();
    let mut point_var = vec![None; recon.tracks.len()];
    let mut n_points = 0;
    for (p, t) in recon.tracks.iter().enumerate() {
        let usable: Vec<_> = t
            .inlier_observations()
            .filter_map(|o| {
                let cam = *index.get(&o.image)?;
                let px = keypoints.get(o.image, o.keypoint)?;
                Some((cam, *px))
            })
            .collect();
        if usable.len() < 2 {
            continue;
        }
        if !options.fix_points {
            point_var[p] = Some(n_points);
            n_points += 1;
        }
        for (cam, pixel) in usable {
            obs.push(Obs {
                cam,
                var: var_of[cam],
                point: p,
                pixel,
            });
        }
    }
    let prior_refs: Vec<_> = priors
        .iter()
        .filter_map(|p| Some((*index.get(&p.i)?, *index.get(&p.j)?, p)))
        .collect();
    let cams: Vec<Camera> = ids.iter().map(|id| cameras[id]).collect();
    let pb = Problem {
        cameras: cams,
        ids: ids.clone(),
        var_of,
        n_var,
        point_var,
        n_points,
        obs,
        priors: prior_refs,
        huber: options.huber_px,
    };
    let mut state = State {
        rotations: ids.iter().map(|id| recon.poses[id].rotation).collect(),
        centers: ids.iter().map(|id| recon.poses[id].center()).collect(),
        points: recon.tracks.iter().map(|t| t.point).collect(),
    };
    let mut cost = pb.cost(&state);
    let mut report = BundleReport {
        initial_cost: cost,
        final_cost: cost,
        accepted_costs: vec![cost],
        ..Default::default()
    };
    let mut lambda = options.initial_lambda;
    for iter in 0..options.max_iterations {
        report.iterations = iter + 1;
        if cost <= 0.0 {
            report.converged = true;
            break;
        }
        let normal = linearize(&pb, &state);
        let mut accepted = false;
        for _ in 0..12 {
            if let Some((dc, dp)) = solve_step(&pb, &normal, lambda) {
                let trial = pb.apply(&state, &dc, &dp);
                let trial_cost = pb.cost(&trial);
                if trial_cost < cost {
                    let rel = (cost - trial_cost) / cost.max(1e-300);
                    state = trial;
                    cost = trial_cost;
                    report.accepted_costs.push(cost);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < options.function_tolerance {
                        report.converged = true;
                    }
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            report.converged = true;
            report.diagnostic = Some(format!("no decreasing step at lambda {lambda:.3e}"));
            break;
        }
        if report.converged {
            break;
        }
    }
    if !report.converged && report.diagnostic.is_none() {
        report.diagnostic = Some(format!("stopped after {} iterations", options.max_iterations));
    }
    report.final_cost = cost;
    for (k, id) in pb.ids.iter().enumerate() {
        recon.poses.insert(*id, Pose::from_center(state.rotations[k], &state.centers[k]));
    }
    for (p, t) in recon.tracks.iter_mut().enumerate() {
        t.point = state.points[p];
    }
    report
}

/// Similarity that moves the camera centroid to the origin and makes the RMS
/// center distance one. Applies it to `recon` and returns it.
pub fn normalize_reconstruction(recon: &mut Reconstruction) -> Sim3Transform {
    let centers: Vec<Vector3<f64>> = recon.poses.values().map(Pose::center).collect();
    if centers.is_empty() {
        return Sim3Transform::identity();
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let rms = (centers.iter().map(|c| (c - mean).norm_squared()).sum::<f64>() / centers.len() as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let t = Sim3Transform::new(scale, Rotation::identity(), -mean * scale);
    recon.transform(&t);
    t
}

/// Reprojection error in pixels of one observation, `None` if behind the camera.
pub fn observation_error(camera: &Camera, pose: &Pose, point: &Vector3<f64>, pixel: &nalgebra::Vector2<f64>) -> Option<f64> {
    let xc = pose.transform(point);
    (xc.z > 1e-9).then(|| (camera.pixel_of(&xc) - pixel).norm())
}

/// Marks inlier observations whose error exceeds `threshold` as outliers.
/// Returns the number of observations flagged.
pub fn filter_observations(
    recon: &mut Reconstruction,
    cameras: &BTreeMap<ImageId, Camera>,
    keypoints: &KeypointSet,
    threshold: f64,
) -> usize {
    let mut flagged = 0;
    let poses = &recon.poses;
    for t in &mut recon.tracks {
        for o in &mut t.observations {
            if !o.inlier {
                continue;
            }
            let (Some(pose), Some(cam), Some(px)) = (poses.get(&o.image), cameras.get(&o.image), keypoints.get(o.image, o.keypoint))
            else {
                continue;
            };
            let bad = observation_error(cam, pose, &t.point, px).is_none_or(|e| e > threshold);
            if bad {
                o.inlier = false;
                flagged += 1;
            }
        }
    }
    flagged
}
