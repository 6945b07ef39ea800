//! Single-camera pose estimation from 2D-3D correspondences.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{Matrix2x3, Matrix6, Vector2, Vector3, Vector6};

use crate::geometry::skew;
use crate::scene::{ImageId, KeypointSet, Reconstruction};
use crate::{Camera, Pose, Rotation};

/// 2D-3D correspondence of a candidate image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

pub fn reprojection_error(camera: &Camera, pose: &Pose, c: &Correspondence) -> f64 {
    let xc = pose.transform(&c.point);
    if xc.z <= 1e-9 {
        return f64::INFINITY;
    }
    (camera.pixel_of(&xc) - c.pixel).norm()
}

pub fn count_inliers(camera: &Camera, pose: &Pose, correspondences: &[Correspondence], threshold_px: f64) -> usize {
    correspondences.iter().filter(|c| reprojection_error(camera, pose, c) < threshold_px).count()
}

/// Gauss-Newton normal equations of the reprojection error in the pose
/// perturbation `R <- exp(phi) R`, `t <- t + dt`.
fn normal_equations(camera: &Camera, pose: &Pose, correspondences: &[Correspondence]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in correspondences {
        let rx = pose.rotation.rotate(&c.point);
        let xc = rx + pose.translation;
        if xc.z <= 1e-9 {
            continue;
        }
        let r = camera.pixel_of(&xc) - c.pixel;
        let iz = 1.0 / xc.z;
        let dp = Matrix2x3::new(
            camera.fx * iz,
            0.0,
            -camera.fx * xc.x * iz * iz,
            0.0,
            camera.fy * iz,
            -camera.fy * xc.y * iz * iz,
        );
        let mut j = nalgebra::Matrix2x6::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dp * -skew(&rx)));
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dp);
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    (h, g)
}

/// Largest rotation standard deviation (radians) of a pose estimated from
/// `correspondences` with isotropic pixel noise; infinite when undetermined.
pub fn rotation_uncertainty(camera: &Camera, pose: &Pose, correspondences: &[Correspondence], noise_px: f64) -> f64 {
    let (h, _) = normal_equations(camera, pose, correspondences);
    let scale = h.diagonal().max();
    if !(scale > 0.0) {
        return f64::INFINITY;
    }
    let eig = (h / scale).symmetric_eigen();
    if eig.eigenvalues.min() <= 1e-14 {
        return f64::INFINITY;
    }
    let Some(cov) = (h / scale).try_inverse() else {
        return f64::INFINITY;
    };
    let block = cov.fixed_view::<3, 3>(0, 0).into_owned() / scale;
    let worst = block.symmetric_eigenvalues().max();
    if !(worst >= 0.0) {
        return f64::INFINITY;
    }
    noise_px * worst.sqrt()
}

/// Levenberg-Marquardt on the pose alone over the given correspondences.
pub fn refine_pose(camera: &Camera, pose: &Pose, correspondences: &[Correspondence], iterations: usize) -> Pose {
    let cost = |p: &Pose| -> f64 {
        correspondences
            .iter()
            .map(|c| {
                let e = reprojection_error(camera, p, c);
                if e.is_finite() {
                    e * e
                } else {
                    1e12
                }
            })
            .sum()
    };
    let mut current = *pose;
    let mut f = cost(&current);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let (h, g) = normal_equations(camera, &current, correspondences);
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * (1.0 + h[(k, k)]);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            let phi = Vector3::new(step[0], step[1], step[2]);
            let dr = Rotation::exp(&phi);
            let trial = Pose::new(dr * current.rotation, current.translation + Vector3::new(step[3], step[4], step[5]));
            let ft = cost(&trial);
            if ft < f {
                let rel = (f - ft) / f.max(1e-300);
                current = trial;
                f = ft;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < 1e-12 {
                    return current;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    current
}

/// Registered images whose inlier observations leave the rotation standard
/// deviation above `max_std` radians.
pub fn weakly_determined_images(
    recon: &Reconstruction,
    cameras: &BTreeMap<ImageId, Camera>,
    keypoints: &KeypointSet,
    noise_px: f64,
    max_std: f64,
) -> BTreeSet<ImageId> {
    let mut per_image: HashMap<ImageId, Vec<Correspondence>> = HashMap::new();
    for t in &recon.tracks {
        if t.inlier_count() < 2 {
            continue;
        }
        for o in t.inlier_observations() {
            if let Some(px) = keypoints.get(o.image, o.keypoint) {
                per_image.entry(o.image).or_default().push(Correspondence { pixel: *px, point: t.point });
            }
        }
    }
    recon
        .poses
        .iter()
        .filter(|(id, pose)| {
            let corr = per_image.get(id).map(Vec::as_slice).unwrap_or(&[]);
            rotation_uncertainty(&cameras[id], pose, corr, noise_px) > max_std
        })
        .map(|(id, _)| *id)
        .collect()
}
