//! Rigid-body poses, twist coordinates, and the pinhole camera model.
//!
//! Conventions used throughout the crate:
//!
//! - A [`Pose`] maps points from its own frame into the parent frame:
//!   `x_parent = R * x_own + t`. A camera pose therefore is camera-to-world.
//! - [`Twist`] coordinates are translational-first, `[vx, vy, vz, wx, wy, wz]`,
//!   in meters and radians.
//! - Pose increments are applied by left multiplication, `exp(delta) * pose`;
//!   all jacobians in this crate are taken with respect to that convention.
//! - Camera frames are right-handed with z forward, x right, y down. Pixel
//!   coordinates are continuous with integer values at pixel centers.

use nalgebra::{Matrix2x6, Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Default minimum projection depth (near plane) in meters.
pub const DEFAULT_NEAR: f64 = 0.1;

/// Rotations closer to a half turn than this have no stable logarithm.
pub const ROTATION_LOG_MARGIN: f64 = 1e-6;

/// Below this angle the trigonometric coefficients switch to their series
/// expansions; well above the point where `1 - cos` style terms lose digits.
const SMALL_ANGLE: f64 = 1e-4;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeomError {
    /// Logarithm requested for a rotation within [`ROTATION_LOG_MARGIN`] of pi,
    /// where the axis is numerically unrecoverable.
    #[error("rotation angle {0:.9} rad is too close to pi for a stable logarithm")]
    AmbiguousRotation(f64),
    /// Projection of a point at or behind the near plane.
    #[error("point with z = {z:.6} m does not clear the near plane at {near} m")]
    BehindCamera { z: f64, near: f64 },
    /// Unprojection with a non-positive depth.
    #[error("depth {0:.6} m is not positive")]
    InvalidDepth(f64),
}

/// Element of se(3): translational velocity first, then rotational.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        let mut c = Vector6::zeros();
        c.fixed_rows_mut::<3>(0).copy_from(&translation);
        c.fixed_rows_mut::<3>(3).copy_from(&rotation);
        Twist(c)
    }

    pub fn from_slice(c: &[f64; 6]) -> Self {
        Twist(Vector6::from_column_slice(c))
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform on SE(3), stored as rotation matrix plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { rotation: Matrix3::identity(), translation: t }
    }

    /// Builds a pose from `[tx, ty, tz]` and an `[qx, qy, qz, qw]` quaternion;
    /// the quaternion is normalized on ingest.
    pub fn from_quaternion_coords(t: [f64; 3], q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::new_normalize(Quaternion::new(q[3], q[0], q[1], q[2]));
        Pose { rotation: *uq.to_rotation_matrix().matrix(), translation: Vector3::from(t) }
    }

    /// Translation plus normalized `[qx, qy, qz, qw]`, with `qw >= 0`.
    pub fn quaternion_coords(&self) -> ([f64; 3], [f64; 4]) {
        let q = self.unit_quaternion();
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        (self.translation.into(), [q.i, q.j, q.k, q.w])
    }

    fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.unit_quaternion().angle()
    }
}

/// Skew-symmetric matrix such that `hat(w) * v == w x v`.
#[rustfmt::skip]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z,  w.y,
        w.z,  0.0, -w.x,
       -w.y,  w.x,  0.0,
    )
}

/// Exponential map se(3) -> SE(3) (Rodrigues plus the translation coupling).
pub fn exp_map(xi: &Twist) -> Pose {
    let v = xi.translation();
    let w = xi.rotation();
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let omega = hat(&w);
    let omega2 = omega * omega;
    // R = I + a W + b W^2, V = I + b W + c W^2. `b` uses 2 sin^2(t/2) instead
    // of 1 - cos(t) to stay accurate at moderate angles.
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let sh = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * sh * sh / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let rotation = Matrix3::identity() + omega * a + omega2 * b;
    let v_mat = Matrix3::identity() + omega * b + omega2 * c;
    Pose { rotation, translation: v_mat * v }
}

/// Logarithm SE(3) -> se(3). Fails with [`GeomError::AmbiguousRotation`] for
/// rotations within [`ROTATION_LOG_MARGIN`] of a half turn.
pub fn log_map(pose: &Pose) -> Result<Twist, GeomError> {
    let q = pose.unit_quaternion();
    let angle = q.angle();
    if angle >= std::f64::consts::PI - ROTATION_LOG_MARGIN {
        return Err(GeomError::AmbiguousRotation(angle));
    }
    let w = q.scaled_axis();
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let omega = hat(&w);
    let omega2 = omega * omega;
    // V^-1 = I - W/2 + k W^2 with k = (1 - (t/2) cot(t/2)) / t^2.
    let k = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let v_inv = Matrix3::identity() - omega * 0.5 + omega2 * k;
    Ok(Twist::new(v_inv * pose.translation, w))
}

/// Difference `a (-) b = log(b^-1 * a)`: the twist that takes `b` to `a` by
/// left multiplication of `b^-1 * a`... i.e. `b * exp(boxminus(a, b)) == a`.
pub fn boxminus(a: &Pose, b: &Pose) -> Result<Twist, GeomError> {
    log_map(&b.inverse().compose(a))
}

/// Pinhole camera intrinsics plus image size at one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        CameraIntrinsics { fx, fy, cx, cy, width, height }
    }

    /// Intrinsics of the next-coarser pyramid level (all quantities halve;
    /// level-l pixel `u` corresponds to level-(l-1) pixel `2u`).
    pub fn halved(&self) -> Self {
        CameraIntrinsics {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: self.cx / 2.0,
            cy: self.cy / 2.0,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    /// Intrinsics after `level` halvings.
    pub fn at_level(&self, level: usize) -> Self {
        let mut k = *self;
        for _ in 0..level {
            k = k.halved();
        }
        k
    }

    /// Perspective projection to continuous pixel coordinates.
    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, GeomError> {
        self.project_with_near(point, DEFAULT_NEAR)
    }

    pub fn project_with_near(&self, point: &Vector3<f64>, near: f64) -> Result<Vector2<f64>, GeomError> {
        if !(point.z > near) {
            return Err(GeomError::BehindCamera { z: point.z, near });
        }
        Ok(Vector2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    /// Back-projects a pixel at the given depth (z distance, not ray length).
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeomError> {
        if !(depth > 0.0) {
            return Err(GeomError::InvalidDepth(depth));
        }
        Ok(Vector3::new(
            depth * (pixel.x - self.cx) / self.fx,
            depth * (pixel.y - self.cy) / self.fy,
            depth,
        ))
    }

    /// Reprojects a pixel with known depth through the relative pose `rel`
    /// (source camera to target camera).
    pub fn warp(&self, rel: &Pose, pixel: &Vector2<f64>, depth: f64) -> Result<Vector2<f64>, GeomError> {
        let p = rel.transform(&self.unproject(pixel, depth)?);
        self.project(&p)
    }

    /// [`Self::warp`] together with its 2x6 jacobian with respect to a
    /// left-multiplied increment `exp(delta) * rel`, evaluated at `delta = 0`.
    pub fn warp_with_jacobian(
        &self,
        rel: &Pose,
        pixel: &Vector2<f64>,
        depth: f64,
    ) -> Result<(Vector2<f64>, Matrix2x6<f64>), GeomError> {
        let p = rel.transform(&self.unproject(pixel, depth)?);
        let uv = self.project(&p)?;
        let iz = 1.0 / p.z;
        let x = p.x * iz;
        let y = p.y * iz;
        // Chain of d(project)/dp with d(exp(delta) * p)/d(delta) = [I | -hat(p)].
        #[rustfmt::skip]
        let jac = Matrix2x6::new(
            self.fx * iz, 0.0,          -self.fx * x * iz, -self.fx * x * y, self.fx * (1.0 + x * x), -self.fx * y,
            0.0,          self.fy * iz, -self.fy * y * iz, -self.fy * (1.0 + y * y), self.fy * x * y, self.fy * x,
        );
        Ok((uv, jac))
    }

    /// Jacobian part of [`Self::warp_with_jacobian`].
    pub fn warp_jacobian(
        &self,
        rel: &Pose,
        pixel: &Vector2<f64>,
        depth: f64,
    ) -> Result<Matrix2x6<f64>, GeomError> {
        Ok(self.warp_with_jacobian(rel, pixel, depth)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn k_test() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 400.0, 400.0, 800, 800)
    }

    fn random_twist(rng: &mut impl Rng, max_t: f64, max_angle: f64) -> Twist {
        let unit = |rng: &mut dyn rand::RngCore| {
            loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm_squared() > 1e-3 {
                    return v.normalize();
                }
            }
        };
        let t = unit(rng) * rng.gen_range(0.0..max_t);
        let w = unit(rng) * rng.gen_range(0.0..max_angle);
        Twist::new(t, w)
    }

    #[test]
    fn exp_of_zero_twist_is_identity() {
        let p = exp_map(&Twist::zero());
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::zeros());
    }

    #[test]
    fn exp_of_pure_translation() {
        let p = exp_map(&Twist::new(Vector3::new(1.0, -2.0, 3.0), Vector3::zeros()));
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::new(1.0, -2.0, 3.0));
    }

    #[test]
    fn exp_couples_translation_through_rotation() {
        // Unit x-velocity under a quarter-turn about z sweeps an arc ending at
        // (2/pi, 2/pi, 0).
        let p = exp_map(&Twist::new(Vector3::x(), Vector3::new(0.0, 0.0, PI / 2.0)));
        assert_relative_eq!(p.translation.x, 2.0 / PI, epsilon = 1e-12);
        assert_relative_eq!(p.translation.y, 2.0 / PI, epsilon = 1e-12);
        assert_relative_eq!(p.translation.z, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.rotation[(0, 1)], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_roundtrips_exp_over_angle_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let xi = random_twist(&mut rng, 10.0, PI - 1e-3);
            let back = log_map(&exp_map(&xi)).unwrap();
            assert_relative_eq!(back.0, xi.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_roundtrips_tiny_rotations_via_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let xi = random_twist(&mut rng, 1.0, 1e-9);
            let back = log_map(&exp_map(&xi)).unwrap();
            assert_relative_eq!(back.0, xi.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = exp_map(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI - 1e-7)));
        assert!(matches!(log_map(&p), Err(GeomError::AmbiguousRotation(_))));
        let ok = exp_map(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI - 1e-3)));
        assert!(log_map(&ok).is_ok());
    }

    #[test]
    fn compose_and_inverse_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = exp_map(&random_twist(&mut rng, 5.0, 3.0));
            let b = exp_map(&random_twist(&mut rng, 5.0, 3.0));
            let ab = a.compose(&b);
            let back = ab.compose(&b.inverse());
            assert_relative_eq!(back.rotation, a.rotation, epsilon = 1e-12);
            assert_relative_eq!(back.translation, a.translation, epsilon = 1e-11);
        }
    }

    #[test]
    fn boxminus_recovers_increment() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let b = exp_map(&random_twist(&mut rng, 5.0, 2.0));
            let t = random_twist(&mut rng, 1.0, 1.0);
            let a = b.compose(&exp_map(&t));
            let d = boxminus(&a, &b).unwrap();
            assert_relative_eq!(d.0, t.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_from_relative_view_transform() {
        // A rendered view at the origin, with the frame one meter ahead of it,
        // places the frame camera at x = -1 when the view-to-frame transform
        // is inverted.
        let render_pose = Pose::identity();
        let view_to_frame = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let frame_pose = render_pose.compose(&view_to_frame.inverse());
        assert_eq!(frame_pose.translation, Vector3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn quaternion_coords_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = exp_map(&random_twist(&mut rng, 5.0, 3.0));
            let (t, q) = p.quaternion_coords();
            let norm: f64 = q.iter().map(|c| c * c).sum::<f64>();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
            let back = Pose::from_quaternion_coords(t, q);
            assert_relative_eq!(back.rotation, p.rotation, epsilon = 1e-12);
            assert_eq!(back.translation, p.translation);
        }
    }

    #[test]
    fn project_known_point() {
        let uv = k_test().project(&Vector3::new(1.0, 2.0, 5.0)).unwrap();
        assert_relative_eq!(uv, Vector2::new(420.0, 440.0), epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_points_behind_near_plane() {
        let k = k_test();
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, 0.05)),
            Err(GeomError::BehindCamera { .. })
        ));
        assert!(k.project(&Vector3::new(0.0, 0.0, 0.100001)).is_ok());
    }

    #[test]
    fn unproject_scales_ray_by_depth() {
        let k = CameraIntrinsics::new(2.0, 2.0, 0.0, 0.0, 64, 64);
        let p = k.unproject(&Vector2::new(4.0, 6.0), 10.0).unwrap();
        assert_eq!(p, Vector3::new(20.0, 30.0, 10.0));
        assert!(matches!(k.unproject(&Vector2::new(0.0, 0.0), 0.0), Err(GeomError::InvalidDepth(_))));
        assert!(matches!(k.unproject(&Vector2::new(0.0, 0.0), -1.0), Err(GeomError::InvalidDepth(_))));
    }

    #[test]
    fn project_unproject_roundtrip() {
        let k = k_test();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let p = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.5..50.0));
            let uv = k.project(&p).unwrap();
            let back = k.unproject(&uv, p.z).unwrap();
            assert_relative_eq!(back, p, epsilon = 1e-10);
        }
    }

    #[test]
    fn warp_with_identity_rel_is_identity() {
        let k = k_test();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let px = Vector2::new(rng.gen_range(0.0..800.0), rng.gen_range(0.0..800.0));
            let d = rng.gen_range(0.2..100.0);
            let warped = k.warp(&Pose::identity(), &px, d).unwrap();
            assert_relative_eq!(warped, px, epsilon = 1e-12);
        }
    }

    #[test]
    fn warp_jacobian_translation_and_roll_columns() {
        let k = k_test();
        // At the principal point: pure x-translation moves the pixel by fx/z,
        // and rotation about the optical axis does not move it at all.
        let px = Vector2::new(k.cx, k.cy);
        let depth = 5.0;
        let jac = k.warp_jacobian(&Pose::identity(), &px, depth).unwrap();
        assert_relative_eq!(jac[(0, 0)], k.fx / depth, epsilon = 1e-12);
        assert_relative_eq!(jac[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(0, 5)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(1, 5)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn warp_jacobian_matches_finite_differences() {
        let k = k_test();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = 1e-6;
        for _ in 0..200 {
            let rel = exp_map(&random_twist(&mut rng, 0.5, 0.3));
            let px = Vector2::new(rng.gen_range(100.0..700.0), rng.gen_range(100.0..700.0));
            let depth = rng.gen_range(2.0..50.0);
            let (_, jac) = match k.warp_with_jacobian(&rel, &px, depth) {
                Ok(r) => r,
                Err(_) => continue,
            };
            for col in 0..6 {
                let mut dv = Vector6::zeros();
                dv[col] = h;
                let plus = k.warp(&exp_map(&Twist(dv)).compose(&rel), &px, depth).unwrap();
                dv[col] = -h;
                let minus = k.warp(&exp_map(&Twist(dv)).compose(&rel), &px, depth).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                for row in 0..2 {
                    let scale = fd[row].abs().max(jac[(row, col)].abs()).max(1.0);
                    assert!(
                        (fd[row] - jac[(row, col)]).abs() / scale < 1e-4,
                        "row {row} col {col}: fd {} vs analytic {}",
                        fd[row],
                        jac[(row, col)]
                    );
                }
            }
        }
    }

    #[test]
    fn intrinsics_halving_matches_power_of_two() {
        let k = CameraIntrinsics::new(350.0, 350.0, 319.5, 239.5, 640, 480);
        let k3 = k.at_level(3);
        assert_relative_eq!(k3.fx, 350.0 / 8.0);
        assert_relative_eq!(k3.cy, 239.5 / 8.0);
        assert_eq!((k3.width, k3.height), (80, 60));
    }
}
