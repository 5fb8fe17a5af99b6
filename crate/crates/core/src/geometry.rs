//! Pinhole camera model and rigid-body poses on SE(3).
//!
//! Poses are world-from-camera: a camera-frame point `x` maps to the world as
//! `R x + t`. Camera axes follow the usual vision convention (x right, y down,
//! z forward). Pixel centres sit on integer coordinates, so pixel `(i, j)` of
//! an image is the continuous location `(i, j)`.
//!
//! Tangent vectors are ordered `(rho, phi)`: three translational components
//! followed by three rotational ones.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x6, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Six-vector `(rho, phi)` in the Lie algebra se(3).
pub type Tangent = Vector6<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}; depth must be positive")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (residual {0:e})")]
    NotOrthonormal(f64),
}

/// Pinhole intrinsics plus the raw-depth scale of the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Meters per raw depth unit (0.001 for millimetre PNGs).
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_scale: f64,
    ) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy, width, height, depth_scale };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidIntrinsics(msg.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie strictly inside the image");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie strictly inside the image");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    /// Same camera at a different resolution (principal point and focal
    /// lengths scale with the image).
    pub fn scaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            depth_scale: self.depth_scale,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// True when a continuous pixel location lies on the sampled image
    /// domain `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }

    /// Camera-frame direction through a pixel with unit z component.
    pub fn ray_through(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// Projects a camera-frame point to `(pixel, depth)`.
pub fn project(point_cam: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<(Vector2<f64>, f64), GeometryError> {
    let z = point_cam.z;
    if !(z > 0.0) {
        return Err(GeometryError::BehindCamera(z));
    }
    let px = Vector2::new(intr.fx * point_cam.x / z + intr.cx, intr.fy * point_cam.y / z + intr.cy);
    Ok((px, z))
}

/// Lifts a pixel with z-depth back to a camera-frame point.
pub fn backproject(pixel: &Vector2<f64>, depth: f64, intr: &CameraIntrinsics) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(intr.ray_through(pixel) * depth)
}

/// Jacobian of the pixel coordinates with respect to the camera-frame point.
pub fn project_jacobian(point_cam: &Vector3<f64>, intr: &CameraIntrinsics) -> nalgebra::Matrix2x3<f64> {
    let (x, y, z) = (point_cam.x, point_cam.y, point_cam.z);
    let iz = 1.0 / z;
    nalgebra::Matrix2x3::new(intr.fx * iz, 0.0, -intr.fx * x * iz * iz, 0.0, intr.fy * iz, -intr.fy * y * iz * iz)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Derivative of `exp(delta) * p` with respect to `delta` at zero.
pub fn left_point_jacobian(p: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p)));
    j
}

/// Pulls a world-space point gradient back onto a left perturbation of the
/// pose that generated the point.
#[inline]
pub fn pose_grad_from_point(p: &Vector3<f64>, grad_p: &Vector3<f64>) -> Tangent {
    let rot = p.cross(grad_p);
    Tangent::new(grad_p.x, grad_p.y, grad_p.z, rot.x, rot.y, rot.z)
}

/// Rigid transform, world-from-camera.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        write!(
            f,
            "Pose(t: [{:.5}, {:.5}, {:.5}], q: [{:.5}, {:.5}, {:.5}, {:.5}])",
            self.translation.x, self.translation.y, self.translation.z, q.i, q.j, q.k, q.w
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(residual < 1e-9) || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotOrthonormal(residual));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// From a unit quaternion (re-normalized) and translation.
    pub fn from_quaternion(q: Quaternion<f64>, translation: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_quaternion(q);
        Self { rotation: *uq.to_rotation_matrix().matrix(), translation }
    }

    /// Camera at `eye` looking at `target` with the given world up vector.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, fwd]);
        Self { rotation, translation: eye }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Maps a world point into this camera's frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Closed-form exponential (Rodrigues rotation plus the V matrix).
    pub fn exp(xi: &Tangent) -> Self {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let phi = xi.fixed_rows::<3>(3).into_owned();
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let k = skew(&phi);
        let k2 = k * k;
        let (a, b, c) = if theta < 1e-2 {
            let t4 = theta2 * theta2;
            (
                1.0 - theta2 / 6.0 + t4 / 120.0 - t4 * theta2 / 5040.0,
                0.5 - theta2 / 24.0 + t4 / 720.0 - t4 * theta2 / 40320.0,
                1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0 - t4 * theta2 / 362880.0,
            )
        } else {
            let s = theta.sin();
            let half = (0.5 * theta).sin();
            (s / theta, 2.0 * half * half / theta2, (theta - s) / (theta2 * theta))
        };
        let rotation = Matrix3::identity() + k * a + k2 * b;
        let v = Matrix3::identity() + k * b + k2 * c;
        Self { rotation, translation: v * rho }
    }

    /// Logarithm; valid for rotation angles below pi.
    pub fn log(&self) -> Tangent {
        let r = &self.rotation;
        let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
        let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let sin = v.norm();
        let theta = sin.atan2(cos);
        let phi = if theta < 1e-8 {
            v
        } else if sin > 1e-4 || cos > 0.0 {
            v * (theta / sin)
        } else {
            // Near pi the antisymmetric part vanishes; recover the axis from
            // the symmetric part instead and take its sign from `v`.
            let sym = (r + r.transpose()) * 0.5;
            let aat = (sym - Matrix3::identity() * cos) / (1.0 - cos);
            let col = (0..3).max_by(|&i, &j| aat[(i, i)].total_cmp(&aat[(j, j)])).unwrap();
            let mut axis = aat.column(col).into_owned().normalize();
            if axis.dot(&v) < 0.0 {
                axis = -axis;
            }
            axis * theta
        };
        let theta2 = theta * theta;
        let k = skew(&phi);
        let coeff = if theta < 1e-2 {
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / theta2
        };
        let v_inv = Matrix3::identity() - k * 0.5 + k * k * coeff;
        let rho = v_inv * self.translation;
        Tangent::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Left update `exp(delta) * self`.
    pub fn retract(&self, delta: &Tangent) -> Self {
        Pose::exp(delta) * *self
    }

    /// Re-orthonormalizes the rotation to counter accumulated rounding.
    pub fn normalized(&self) -> Self {
        let q = self.quaternion();
        Self { rotation: *q.to_rotation_matrix().matrix(), translation: self.translation }
    }

    pub fn orthonormality_residual(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Translation distance and rotation angle (radians) between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse() * *other;
        let r = &rel.rotation;
        let sin = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
        let angle = sin.atan2((r.trace() - 1.0) * 0.5);
        ((self.translation - other.translation).norm(), angle)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose { rotation: self.rotation * rhs.rotation, translation: self.rotation * rhs.translation + self.translation }
    }
}

/// Result of re-projecting a pixel into a second view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warped {
    pub pixel: Vector2<f64>,
    /// z-depth of the point in the target camera.
    pub depth: f64,
    /// The point in the target camera frame.
    pub point: Vector3<f64>,
    /// The point in world coordinates.
    pub world: Vector3<f64>,
}

/// Re-projects pixel `q_c` observed at `depth_obs` in camera `pose_c` into
/// camera `pose_w`. Returns `None` when the point lands behind camera `w`,
/// outside its image, or when the observed depth is invalid.
pub fn warp_pixel(
    q_c: &Vector2<f64>,
    depth_obs: f64,
    pose_c: &Pose,
    pose_w: &Pose,
    intr: &CameraIntrinsics,
) -> Option<Warped> {
    let x_c = backproject(q_c, depth_obs, intr).ok()?;
    let world = pose_c.transform_point(&x_c);
    if pose_c == pose_w {
        return intr.contains(q_c).then_some(Warped { pixel: *q_c, depth: depth_obs, point: x_c, world });
    }
    let point = pose_w.inverse_transform_point(&world);
    let (pixel, depth) = project(&point, intr).ok()?;
    intr.contains(&pixel).then_some(Warped { pixel, depth, point, world })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 80.0, 60.0, 160, 120, 0.001).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64) -> Pose {
        let mut xi = Tangent::zeros();
        for i in 0..3 {
            xi[i] = rng.random_range(-2.0..2.0);
        }
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .normalize();
        let angle = rng.random_range(0.0..max_angle);
        xi.fixed_rows_mut::<3>(3).copy_from(&(axis * angle));
        Pose::exp(&xi)
    }

    #[test]
    fn projection_examples() {
        let k = intr();
        let (px, d) = project(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap();
        assert_eq!(px, Vector2::new(80.0, 60.0));
        assert_eq!(d, 1.0);
        let (px, _) = project(&Vector3::new(0.5, 0.0, 1.0), &k).unwrap();
        assert_eq!(px, Vector2::new(130.0, 60.0));
        assert!(matches!(project(&Vector3::new(0.0, 0.0, -1.0), &k), Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn backprojection_examples() {
        let k = intr();
        assert_eq!(backproject(&Vector2::new(80.0, 60.0), 2.0, &k).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(backproject(&Vector2::new(130.0, 60.0), 1.0, &k).unwrap(), Vector3::new(0.5, 0.0, 1.0));
        assert!(matches!(backproject(&Vector2::new(1.0, 1.0), 0.0, &k), Err(GeometryError::InvalidDepth(_))));
    }

    #[test]
    fn projection_round_trip() {
        let k = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let px = Vector2::new(rng.random_range(0.0..159.0), rng.random_range(0.0..119.0));
            let d = rng.random_range(0.1..10.0);
            let (back, bd) = project(&backproject(&px, d, &k).unwrap(), &k).unwrap();
            worst = worst.max((back - px).norm()).max((bd - d).abs());
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 4, 4, 0.0).is_err());
    }

    #[test]
    fn exp_examples() {
        assert_eq!(Pose::exp(&Tangent::zeros()), Pose::identity());
        let p = Pose::exp(&Tangent::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for i in 0..1000 {
            let mut xi = Tangent::zeros();
            for j in 0..3 {
                xi[j] = rng.random_range(-3.0..3.0);
            }
            let axis =
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    .normalize();
            // Cover the tiny-angle branch too.
            let angle = if i % 50 == 0 { rng.random_range(0.0..1e-6) } else { rng.random_range(0.0..3.0) };
            xi.fixed_rows_mut::<3>(3).copy_from(&(axis * angle));
            let back = Pose::exp(&xi).log();
            let e = (back - xi).norm();
            worst = worst.max(e);
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn log_near_pi() {
        let xi = Tangent::new(0.3, -0.2, 0.1, 0.0, 0.0, std::f64::consts::PI - 1e-7);
        let back = Pose::exp(&xi).log();
        assert!((back - xi).norm() < 1e-6, "{back:?}");
    }

    #[test]
    fn group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (a, b, c) = (random_pose(&mut rng, 3.0), random_pose(&mut rng, 3.0), random_pose(&mut rng, 3.0));
            let lhs = (a * b) * c;
            let rhs = a * (b * c);
            assert!((lhs.rotation() - rhs.rotation()).norm() < 1e-9);
            assert!((lhs.translation() - rhs.translation()).norm() < 1e-9);
            let id = a * a.inverse();
            assert!((id.rotation() - Matrix3::identity()).norm() < 1e-9);
            assert!(id.translation().norm() < 1e-9);
            assert!(a.orthonormality_residual() < 1e-9);
        }
    }

    #[test]
    fn pose_rejects_bad_rotation() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        assert!(Pose::new(-Matrix3::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let p = Pose::look_at(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::z());
        assert_relative_eq!(p.transform_vector(&Vector3::z()), Vector3::x(), epsilon = 1e-12);
        assert!(p.rotation().determinant() > 0.999);
    }

    #[test]
    fn warp_examples() {
        let k = intr();
        let pose = Pose::exp(&Tangent::new(0.1, 0.2, 0.3, 0.05, -0.1, 0.2));
        let q = Vector2::new(33.0, 71.0);
        let w = warp_pixel(&q, 1.7, &pose, &pose, &k).unwrap();
        assert!((w.pixel - q).norm() < 1e-9);
        assert!((w.depth - 1.7).abs() < 1e-9);

        // Second camera moved +0.1 m along x: a fronto-parallel point at
        // depth 1 shifts left by fx * 0.1 = 10 pixels.
        let pose_w = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let w = warp_pixel(&Vector2::new(80.0, 60.0), 1.0, &Pose::identity(), &pose_w, &k).unwrap();
        assert_relative_eq!(w.pixel.x, 70.0, epsilon = 1e-12);
        assert_relative_eq!(w.depth, 1.0, epsilon = 1e-12);

        // Target camera turned around: everything lands behind it.
        let flipped = Pose::exp(&Tangent::new(0.0, 0.0, 0.0, 0.0, std::f64::consts::PI - 1e-3, 0.0));
        assert!(warp_pixel(&Vector2::new(80.0, 60.0), 1.0, &Pose::identity(), &flipped, &k).is_none());
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let p = Vector3::new(0.3, -1.2, 2.5);
        let j = left_point_jacobian(&p);
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Tangent::zeros();
            d[k] = h;
            let plus = Pose::exp(&d).transform_point(&p);
            d[k] = -h;
            let minus = Pose::exp(&d).transform_point(&p);
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - j.column(k)).norm() < 1e-8);
        }
        let g = Vector3::new(0.7, 0.1, -0.4);
        assert_relative_eq!(pose_grad_from_point(&p, &g), j.transpose() * g, epsilon = 1e-14);
    }
}
