//! Rotations, rigid transforms and the pinhole camera shared by every stage.
//!
//! Conventions: right-handed world, gravity along -Y, characters stand along
//! +Y and face +Z. Cameras look along their own +Z axis with image x to the
//! right and image y down.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Camera-frame depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Axis-angle rotation: direction is the axis, norm is the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation {
    pub axis_angle: [f64; 3],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { axis_angle: [0.0; 3] };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { axis_angle: [x, y, z] }
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        Self::from_vector(&(axis * (angle / n)))
    }

    pub fn about_z(angle: f64) -> Self {
        Self::new(0.0, 0.0, angle)
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::from(self.axis_angle)
    }

    pub fn angle(&self) -> f64 {
        self.vector().norm()
    }

    pub fn is_identity(&self) -> bool {
        self.axis_angle == [0.0; 3]
    }

    pub fn inverse(&self) -> Self {
        Self::from_vector(&-self.vector())
    }

    /// Rodrigues' formula. The zero vector maps to the identity exactly.
    pub fn to_matrix(&self) -> Mat3 {
        rotation_to_matrix(self)
    }

    /// Logarithm map of a rotation matrix, angle in [0, pi].
    pub fn from_matrix(m: &Mat3) -> Self {
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let angle = cos.acos();
        let w = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        if angle < 1e-8 {
            // first order: R ~ I + [w]x
            return Self::from_vector(&(w * 0.5));
        }
        if std::f64::consts::PI - angle < 1e-6 {
            // near pi the skew part vanishes; recover the axis from R + I
            let b = (m + Mat3::identity()) * 0.5;
            let mut axis = Vec3::new(b[(0, 0)].max(0.0).sqrt(), b[(1, 1)].max(0.0).sqrt(), b[(2, 2)].max(0.0).sqrt());
            let k = (0..3).max_by(|&i, &j| axis[i].total_cmp(&axis[j])).unwrap_or(0);
            for i in 0..3 {
                if i != k && b[(k, i)] < 0.0 {
                    axis[i] = -axis[i];
                }
            }
            if w.dot(&axis) < 0.0 {
                axis = -axis;
            }
            return Self::from_axis_angle(&axis, angle);
        }
        Self::from_vector(&(w * (angle / (2.0 * angle.sin()))))
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Rotation) -> Rotation {
        Rotation::from_matrix(&(self.to_matrix() * first.to_matrix()))
    }
}

pub fn rotation_to_matrix(r: &Rotation) -> Mat3 {
    let w = r.vector();
    let theta2 = w.norm_squared();
    if theta2 == 0.0 {
        return Mat3::identity();
    }
    let theta = theta2.sqrt();
    let k = skew(&w);
    // sin(t)/t and (1-cos(t))/t^2 with series fallback for tiny angles
    let (a, b) = if theta < 1e-6 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix about +Z.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `x -> linear * x + translation`, with `linear` a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        linear: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: &Rotation, translation: Vec3) -> Self {
        Self { linear: rotation.to_matrix(), translation }
    }

    pub fn from_parts(linear: Mat3, translation: Vec3) -> Self {
        Self { linear, translation }
    }

    pub fn translation(t: Vec3) -> Self {
        Self { linear: Mat3::identity(), translation: t }
    }

    pub fn rotation(&self) -> Rotation {
        Rotation::from_matrix(&self.linear)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            linear: self.linear * other.linear,
            translation: self.linear * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.linear.transpose();
        RigidTransform { linear: rt, translation: -(rt * self.translation) }
    }

    /// Packs as (axis-angle, translation).
    pub fn to_params(&self) -> [f64; 6] {
        let r = self.rotation().axis_angle;
        let t = self.translation;
        [r[0], r[1], r[2], t.x, t.y, t.z]
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self::new(&Rotation::new(p[0], p[1], p[2]), Vec3::new(p[3], p[4], p[5]))
    }
}

/// Intrinsics shared by every frame of a shot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(crate::Error::input(format!(
                "invalid intrinsics: fx={} fy={} size={}x{}",
                self.fx, self.fy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub intrinsics: Intrinsics,
    pub world_to_camera: RigidTransform,
}

impl PinholeCamera {
    pub fn new(intrinsics: Intrinsics, world_to_camera: RigidTransform) -> crate::Result<Self> {
        intrinsics.validate()?;
        Ok(Self { intrinsics, world_to_camera })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera centre in world coordinates.
    pub fn eye(&self) -> Vec3 {
        self.world_to_camera.inverse().translation
    }

    /// Projects a world point; `None` when it is at or behind the camera plane.
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        self.project_camera_frame(&self.world_to_camera.apply(p))
    }

    pub fn project_camera_frame(&self, pc: &Vec3) -> Option<Vec2> {
        if pc.z <= MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        Some(Vec2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    }

    pub fn with_extrinsics(&self, world_to_camera: RigidTransform) -> Self {
        Self { intrinsics: self.intrinsics, world_to_camera }
    }

    /// Camera at `eye` looking at `target`, with world `up` mapped to image up.
    pub fn look_at(intrinsics: Intrinsics, eye: Vec3, target: Vec3, up: Vec3) -> crate::Result<Self> {
        let z = target - eye;
        let x = z.cross(&up);
        if z.norm() == 0.0 || x.norm() == 0.0 {
            return Err(crate::Error::input("look_at: degenerate eye/target/up"));
        }
        let z = z.normalize();
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(intrinsics, RigidTransform::from_parts(r, -(r * eye)))
    }
}

pub fn project(cam: &PinholeCamera, p: &Vec3) -> Option<Vec2> {
    cam.project(p)
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cam100() -> PinholeCamera {
        let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 128.0, cy: 128.0, width: 256, height: 256 };
        PinholeCamera::new(k, RigidTransform::IDENTITY).unwrap()
    }

    #[test]
    fn zero_rotation_is_exact_identity() {
        assert_eq!(Rotation::IDENTITY.to_matrix(), Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let m = Rotation::new(0.0, 0.0, FRAC_PI_2).to_matrix();
        let p = m * Vec3::x();
        assert!((p - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = Rotation::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let m = r.to_matrix();
            assert!((m * m.transpose() - Mat3::identity()).abs().max() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
            let back = r.to_matrix() * r.inverse().to_matrix();
            assert!((back - Mat3::identity()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let cam = cam100();
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 2.0)), Some(Vec2::new(128.0, 128.0)));
        assert_eq!(cam.project(&Vec3::new(1.0, 0.0, 2.0)), Some(Vec2::new(178.0, 128.0)));
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 0.0)), None);
    }

    #[test]
    fn log_map_near_pi() {
        let r = Rotation::from_axis_angle(&Vec3::new(1.0, -2.0, 0.5), PI - 1e-9);
        let back = Rotation::from_matrix(&r.to_matrix());
        assert!((back.to_matrix() - r.to_matrix()).abs().max() < 1e-6);
    }

    #[test]
    fn look_at_centres_target() {
        let k = Intrinsics { fx: 200.0, fy: 200.0, cx: 64.0, cy: 48.0, width: 128, height: 96 };
        let cam = PinholeCamera::look_at(k, Vec3::new(3.0, 1.0, 4.0), Vec3::new(0.0, 1.0, 0.0), Vec3::y()).unwrap();
        let uv = cam.project(&Vec3::new(0.0, 1.0, 0.0)).unwrap();
        assert!((uv - Vec2::new(64.0, 48.0)).norm() < 1e-9);
        // world up appears above the target in the image
        let above = cam.project(&Vec3::new(0.0, 2.0, 0.0)).unwrap();
        assert!(above.y < 48.0);
        assert!((cam.eye() - Vec3::new(3.0, 1.0, 4.0)).norm() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(r in vec3(), t in vec3()) {
            let tr = RigidTransform::new(&Rotation::from_vector(&r), t);
            let id = tr.compose(&tr.inverse());
            prop_assert!((id.linear - Mat3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
        }

        #[test]
        fn log_exp_round_trip(r in vec3()) {
            prop_assume!(r.norm() < PI - 1e-3);
            let back = Rotation::from_matrix(&Rotation::from_vector(&r).to_matrix());
            prop_assert!((back.vector() - r).norm() < 1e-9);
        }

        #[test]
        fn projection_is_invariant_under_joint_rigid_motion(p in vec3(), r in vec3(), t in vec3()) {
            let base = PinholeCamera::look_at(
                cam100().intrinsics, Vec3::new(0.5, 0.3, -6.0), Vec3::zeros(), Vec3::y()).unwrap();
            let motion = RigidTransform::new(&Rotation::from_vector(&r), t);
            let moved_cam = base.with_extrinsics(base.world_to_camera.compose(&motion.inverse()));
            let a = base.project(&p);
            let b = moved_cam.project(&motion.apply(&p));
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).norm() < 1e-6),
                (None, None) => {}
                _ => prop_assert!(false, "visibility changed"),
            }
        }
    }
}
