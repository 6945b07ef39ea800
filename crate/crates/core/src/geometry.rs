//! Rotation, rigid and similarity transforms plus the pinhole camera model.
//!
//! All poses are world-to-camera: a world point `X` maps to camera coordinates
//! `R * X + t`, and the camera center is `C = -R^T t`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x4, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Result, SfmError};
use crate::scalar::Real;

/// Cross-product matrix `[v]_x`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// Element of SO(3) stored as an orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SO3<T: Real> {
    matrix: Matrix3<T>,
}

impl<T: Real> SO3<T> {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Wraps a matrix the caller guarantees to be a rotation.
    pub fn from_matrix_unchecked(matrix: Matrix3<T>) -> Self {
        Self { matrix }
    }

    /// Nearest rotation (Frobenius sense) to an arbitrary 3x3 matrix.
    pub fn project(m: &Matrix3<T>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < T::zero() {
            d[(2, 2)] = -T::one();
        }
        Self {
            matrix: u * d * v_t,
        }
    }

    /// Exponential map (Rodrigues formula).
    pub fn exp(omega: &Vector3<T>) -> Self {
        let theta_sq = omega.norm_squared();
        let theta = theta_sq.sqrt();
        let k = skew(omega);
        let k2 = k * k;
        let (a, b) = if theta < T::lit(1e-4) {
            (
                T::one() - theta_sq / T::lit(6.0),
                T::lit(0.5) - theta_sq / T::lit(24.0),
            )
        } else {
            (theta.sin() / theta, (T::one() - theta.cos()) / theta_sq)
        };
        Self {
            matrix: Matrix3::identity() + k * a + k2 * b,
        }
    }

    /// Logarithm map. At an angle of exactly `pi` the axis sign is chosen so that
    /// its first non-zero component is positive.
    pub fn log(&self) -> Vector3<T> {
        let r = &self.matrix;
        let v = vee(r);
        let sin_theta = v.norm();
        let cos_theta = ((r.trace() - T::one()) * T::lit(0.5)).clamp(-T::one(), T::one());
        let theta = sin_theta.atan2(cos_theta);
        if theta < T::lit(1e-4) {
            // theta / sin(theta) ~ 1 + theta^2 / 6
            return v * (T::one() + theta * theta / T::lit(6.0));
        }
        if cos_theta > T::lit(-0.9) {
            return v * (theta / sin_theta);
        }
        // Near pi the antisymmetric part vanishes; read the axis from R + I = 2 a a^T (+ O(sin)).
        let sym = (r + r.transpose()) * T::lit(0.5) + Matrix3::identity() * (-cos_theta);
        let mut best = 0;
        for c in 1..3 {
            if sym[(c, c)] > sym[(best, best)] {
                best = c;
            }
        }
        let mut axis: Vector3<T> = sym.column(best).into_owned();
        axis /= axis.norm();
        if sin_theta > T::small() {
            if axis.dot(&v) < T::zero() {
                axis = -axis;
            }
        } else {
            let lead = axis.iter().copied().find(|c| c.abs() > T::lit(1e-9));
            if matches!(lead, Some(c) if c < T::zero()) {
                axis = -axis;
            }
        }
        axis * theta
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.matrix
    }

    pub fn inverse(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.matrix * v
    }

    /// Geodesic angle to the identity, in `[0, pi]`.
    pub fn angle(&self) -> T {
        self.log().norm()
    }

    /// Unit quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn to_quaternion(&self) -> [T; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.matrix));
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < T::zero() {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        c
    }

    pub fn from_quaternion(w: T, x: T, y: T, z: T) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Self {
            matrix: q.to_rotation_matrix().into_inner(),
        }
    }

    /// Frobenius deviation of `R R^T` from identity plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> T {
        (self.matrix * self.matrix.transpose() - Matrix3::identity()).norm()
            + (self.matrix.determinant() - T::one()).abs()
    }
}

impl<T: Real> Mul for SO3<T> {
    type Output = SO3<T>;
    fn mul(self, rhs: SO3<T>) -> SO3<T> {
        SO3 {
            matrix: self.matrix * rhs.matrix,
        }
    }
}

impl<T: Real> Mul<Vector3<T>> for SO3<T> {
    type Output = Vector3<T>;
    fn mul(self, rhs: Vector3<T>) -> Vector3<T> {
        self.matrix * rhs
    }
}

/// `|| log(R_j R_i^T) ||`, in `[0, pi]`.
pub fn angular_distance<T: Real>(ri: &SO3<T>, rj: &SO3<T>) -> T {
    (*rj * ri.inverse()).angle()
}

/// `|| R_i - R_j ||_F`.
pub fn chordal_distance<T: Real>(ri: &SO3<T>, rj: &SO3<T>) -> T {
    (ri.matrix() - rj.matrix()).norm()
}

/// World-to-camera rigid transform `[R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3<T: Real> {
    pub rotation: SO3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> SE3<T> {
    pub fn new(rotation: SO3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(SO3::identity(), Vector3::zeros())
    }

    /// Pose from a rotation and a camera center.
    pub fn from_center(rotation: SO3<T>, center: &Vector3<T>) -> Self {
        let translation = -(rotation.matrix() * center);
        Self::new(rotation, translation)
    }

    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.matrix().transpose() * self.translation)
    }

    /// World point to camera coordinates.
    pub fn transform(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation.matrix() * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3<T>) -> SE3<T> {
        SE3::new(
            self.rotation * other.rotation,
            self.rotation.matrix() * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> SE3<T> {
        let rt = self.rotation.inverse();
        SE3::new(rt, -(rt.matrix() * self.translation))
    }

    /// 3x4 projection matrix `[R | t]` (normalized camera).
    pub fn matrix3x4(&self) -> Matrix3x4<T> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Relative pose from camera `i` to camera `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose<T: Real> {
    /// `R_ij = R_j R_i^T`.
    pub rotation: SO3<T>,
    /// `t_j - R_ij t_i`, not normalized.
    pub translation: Vector3<T>,
    /// Unit direction of `translation`; `None` when the centers coincide.
    pub direction: Option<Vector3<T>>,
}

impl<T: Real> RelativePose<T> {
    pub fn is_zero_baseline(&self) -> bool {
        self.direction.is_none()
    }
}

/// Relative pose such that `X_j = R_ij X_i + t_ij` for camera-frame points.
pub fn relative_pose<T: Real>(pi: &SE3<T>, pj: &SE3<T>) -> RelativePose<T> {
    let rotation = pj.rotation * pi.rotation.inverse();
    let translation = pj.translation - rotation.matrix() * pi.translation;
    let scale = pi.translation.norm().max(pj.translation.norm()).max(T::one());
    let norm = translation.norm();
    let direction = if norm <= T::lit(1e-12) * scale || norm <= T::small() {
        None
    } else {
        Some(translation / norm)
    };
    RelativePose {
        rotation,
        translation,
        direction,
    }
}

/// Similarity transform `X -> s R X + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3<T: Real> {
    pub scale: T,
    pub rotation: SO3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Sim3<T> {
    pub fn new(scale: T, rotation: SO3<T>, translation: Vector3<T>) -> Self {
        debug_assert!(scale > T::zero());
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), SO3::identity(), Vector3::zeros())
    }

    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation.matrix() * x * self.scale + self.translation
    }

    /// `self ∘ first`.
    pub fn compose(&self, first: &Sim3<T>) -> Sim3<T> {
        Sim3::new(
            self.scale * first.scale,
            self.rotation * first.rotation,
            self.rotation.matrix() * first.translation * self.scale + self.translation,
        )
    }

    pub fn inverse(&self) -> Sim3<T> {
        let rt = self.rotation.inverse();
        let inv_s = T::one() / self.scale;
        Sim3::new(inv_s, rt, -(rt.matrix() * self.translation) * inv_s)
    }

    /// Re-expresses a world-to-camera pose after the world frame is mapped by `self`.
    pub fn transform_pose(&self, pose: &SE3<T>) -> SE3<T> {
        let rotation = pose.rotation * self.rotation.inverse();
        let center = self.apply(&pose.center());
        SE3::from_center(rotation, &center)
    }
}

/// `sim3_compose(T2, T1) = T2 ∘ T1`.
pub fn sim3_compose<T: Real>(t2: &Sim3<T>, t1: &Sim3<T>) -> Sim3<T> {
    t2.compose(t1)
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> PinholeCamera<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(SfmError::InvalidInput("focal lengths must be positive".into()));
        }
        let w = T::lit(self.width as f64);
        let h = T::lit(self.height as f64);
        if !(self.cx >= T::zero() && self.cx <= w && self.cy >= T::zero() && self.cy <= h) {
            return Err(SfmError::InvalidInput("principal point outside image".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> Matrix3<T> {
        Matrix3::new(
            self.fx,
            T::zero(),
            self.cx,
            T::zero(),
            self.fy,
            self.cy,
            T::zero(),
            T::zero(),
            T::one(),
        )
    }

    pub fn k_inverse(&self) -> Matrix3<T> {
        Matrix3::new(
            T::one() / self.fx,
            T::zero(),
            -self.cx / self.fx,
            T::zero(),
            T::one() / self.fy,
            -self.cy / self.fy,
            T::zero(),
            T::zero(),
            T::one(),
        )
    }

    /// `K^-1 [u, v, 1]^T`.
    pub fn normalize(&self, pixel: &Vector2<T>) -> Vector3<T> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            T::one(),
        )
    }

    /// Pixel of a camera-frame point (no cheirality check).
    pub fn pixel_of(&self, xc: &Vector3<T>) -> Vector2<T> {
        Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        )
    }

    pub fn contains(&self, pixel: &Vector2<T>) -> bool {
        pixel.x >= T::zero()
            && pixel.y >= T::zero()
            && pixel.x < T::lit(self.width as f64)
            && pixel.y < T::lit(self.height as f64)
    }
}

/// Projection result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T: Real> {
    pub pixel: Vector2<T>,
    pub in_front: bool,
}

/// Depth below which a point counts as not in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;

pub fn project<T: Real>(camera: &PinholeCamera<T>, pose: &SE3<T>, x: &Vector3<T>) -> Projection<T> {
    let xc = pose.transform(x);
    Projection {
        pixel: camera.pixel_of(&xc),
        in_front: xc.z > T::lit(MIN_DEPTH),
    }
}

/// Inverse left Jacobian of SO(3): `log(exp(d) exp(r)) ≈ r + J_l^-1(r) d`.
pub fn left_jacobian_inverse<T: Real>(r: &Vector3<T>) -> Matrix3<T> {
    let theta_sq = r.norm_squared();
    let k = skew(r);
    let coeff = if theta_sq < T::lit(1e-8) {
        T::one() / T::lit(12.0) + theta_sq / T::lit(720.0)
    } else {
        let theta = theta_sq.sqrt();
        T::one() / theta_sq - (T::one() + theta.cos()) / (T::lit(2.0) * theta * theta.sin())
    };
    Matrix3::identity() - k * T::lit(0.5) + k * k * coeff
}

/// Inverse right Jacobian of SO(3): `log(exp(r) exp(d)) ≈ r + J_r^-1(r) d`.
pub fn right_jacobian_inverse<T: Real>(r: &Vector3<T>) -> Matrix3<T> {
    left_jacobian_inverse(&-r)
}

/// Angle in radians between two vectors.
pub fn angle_between<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a.cross(b).norm().atan2(a.dot(b))
}
