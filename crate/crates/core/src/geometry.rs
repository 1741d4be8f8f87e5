//! Rigid-body math, the pinhole camera and ray generation.
//!
//! Poses are camera-to-world transforms. The camera looks down its local
//! `-z` axis with `+x` to the right and `+y` up; image rows grow downwards.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle the exponential map switches to Taylor series.
const SMALL_ANGLE: f64 = 1e-6;

/// Orthonormality / determinant tolerance for a valid pose.
pub const POSE_TOLERANCE: f64 = 1e-9;

/// Rigid camera pose: `x_world = rotation * x_cam + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Element of se(3): rotational part `omega` (radians) and translational
/// part `v` (scene units).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    /// Twist from a 6-vector ordered `(omega, v)`.
    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            omega: Vec3::new(a[0], a[1], a[2]),
            v: Vec3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    /// The 4x4 matrix form of the twist.
    pub fn hat(&self) -> Matrix4<f64> {
        let w = skew(&self.omega);
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.v);
        m
    }
}

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// SE(3) exponential. Rotation by Rodrigues' formula, translation through the
/// left Jacobian of SO(3).
pub fn exp_se3(xi: &Twist) -> PoseSE3 {
    let theta2 = xi.omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(&xi.omega);
    let w2 = w * w;
    let (a, b, c) = if theta < SMALL_ANGLE {
        // sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        let s = theta.sin();
        // 1 - cos written as 2 sin^2(t/2) to avoid cancellation
        let h = (0.5 * theta).sin();
        (s / theta, 2.0 * h * h / theta2, (theta - s) / (theta2 * theta))
    };
    let rotation = Mat3::identity() + w * a + w2 * b;
    let jacobian = Mat3::identity() + w * b + w2 * c;
    PoseSE3 {
        rotation,
        translation: jacobian * xi.v,
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose and checks the rotation invariants.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate(POSE_TOLERANCE)?;
        Ok(p)
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *r.matrix(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate
    /// camera `+y`.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Self> {
        let back = eye - target;
        if back.norm() < 1e-12 {
            return Err(Error::domain("look_at: eye coincides with target"));
        }
        let z = back.normalize();
        let x = up.cross(&z);
        if x.norm() < 1e-9 {
            return Err(Error::domain("look_at: up is parallel to the view axis"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Ok(Self {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: *eye,
        })
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Left-multiplicative update `exp(xi) * self`.
    pub fn retract(&self, xi: &Twist) -> PoseSE3 {
        exp_se3(xi).compose(self)
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::domain("pose has non-finite entries"));
        }
        let ortho = self.orthonormality_error();
        if ortho >= tol {
            return Err(Error::domain(format!(
                "rotation is not orthonormal (max |R^T R - I| = {ortho:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() >= tol {
            return Err(Error::domain(format!("rotation determinant is {det}")));
        }
        Ok(())
    }

    /// 4x4 homogeneous matrix, row-major.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Parses a row-major 4x4 matrix; the last row must be `0 0 0 1`.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::domain(format!("pose needs 16 values, got {}", m.len())));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::domain("pose matrix last row must be 0 0 0 1"));
        }
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }
}

impl Serialize for PoseSE3 {
    fn serialize<Z: serde::Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseSE3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        PoseSE3::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center, horizontal field of
    /// view in degrees.
    pub fn from_fov(width: u32, height: u32, fov_x_deg: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Unit direction in the camera frame through sub-pixel `(px, py)`.
    pub fn camera_direction(&self, px: f64, py: f64) -> Vec3 {
        Vec3::new((px - self.cx) / self.fx, -(py - self.cy) / self.fy, -1.0).normalize()
    }

    /// Projects a camera-frame point to pixel coordinates. `None` behind the
    /// camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        if p_cam.z >= 0.0 {
            return None;
        }
        let depth = -p_cam.z;
        Some((
            self.cx + self.fx * p_cam.x / depth,
            self.cy - self.fy * p_cam.y / depth,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

pub fn ray_for_pixel(intr: &CameraIntrinsics, pose: &PoseSE3, px: f64, py: f64) -> Result<Ray> {
    let inside = px >= 0.0 && py >= 0.0 && px < intr.width as f64 && py < intr.height as f64;
    if !inside {
        return Err(Error::domain(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            intr.width, intr.height
        )));
    }
    let d = pose.rotation * intr.camera_direction(px, py);
    Ok(Ray {
        origin: pose.translation,
        direction: d.normalize(),
    })
}

/// Translation distance and geodesic rotation angle (degrees) between poses.
pub fn pose_error(a: &PoseSE3, b: &PoseSE3) -> (f64, f64) {
    let dt = (a.translation - b.translation).norm();
    let r = a.rotation * b.rotation.transpose();
    // atan2 keeps full precision near zero, where acos of the trace does not
    let sin = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos = 0.5 * (r.trace() - 1.0);
    (dt, sin.atan2(cos).to_degrees())
}

/// Axis-aligned box in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.max[i] > self.min[i]) {
            Ok(())
        } else {
            Err(Error::domain(format!("degenerate bounds {self:?}")))
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    /// Longest side.
    pub fn max_extent(&self) -> f64 {
        let e = self.extent();
        e[0].max(e[1]).max(e[2])
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Slab test; returns the parametric interval of the ray inside the box
    /// intersected with `[near, far]`.
    pub fn clip_ray(&self, ray: &Ray, near: f64, far: f64) -> Option<(f64, f64)> {
        let mut t0 = near;
        let mut t1 = far;
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.direction[i];
            if d.abs() < 1e-15 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut a = (self.min[i] - o) * inv;
            let mut b = (self.max[i] - o) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Scaling-and-squaring matrix exponential, independent of the closed form.
    fn expm(a: &Matrix4<f64>) -> Matrix4<f64> {
        let norm = a.abs().max();
        let s = (norm.log2().ceil() as i32 + 4).max(0);
        let scaled = a / 2f64.powi(s);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    fn as_matrix4(p: &PoseSE3) -> Matrix4<f64> {
        Matrix4::from_row_slice(&p.to_row_major())
    }

    fn arb_twist(scale: f64) -> impl Strategy<Value = Twist> {
        prop::array::uniform6(-scale..scale).prop_map(Twist::from_array)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_se3(&Twist::default()), PoseSE3::identity());
    }

    #[test]
    fn exp_of_pure_translation() {
        let p = exp_se3(&Twist::new(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)));
        assert_eq!(p.rotation, Mat3::identity());
        assert_eq!(p.translation, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_quarter_turn_matches_matrix_exponential() {
        let xi = Twist::new(Vec3::new(0.0, 0.0, PI / 2.0), Vec3::zeros());
        let p = exp_se3(&xi);
        let diff = (as_matrix4(&p) - expm(&xi.hat())).abs().max();
        assert!(diff < 1e-8, "diff {diff}");
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation - expected).abs().max() < 1e-12);
    }

    #[test]
    fn exp_small_angle_branch_is_first_order() {
        let xi = Twist::new(Vec3::new(3e-7, -2e-7, 5e-7), Vec3::new(1e-7, 4e-7, -2e-7));
        let p = as_matrix4(&exp_se3(&xi));
        let first = Matrix4::identity() + xi.hat();
        assert!((p - first).abs().max() < 1e-9);
        // both sides of the branch point agree with the series oracle
        for w in [0.999e-6, 1.001e-6] {
            let xi = Twist::new(Vec3::new(0.0, 0.0, w), Vec3::new(1.0, 0.0, 0.0));
            let d = (as_matrix4(&exp_se3(&xi)) - expm(&xi.hat())).abs().max();
            assert!(d < 1e-12, "{w}: {d:e}");
        }
    }

    #[test]
    fn compose_identity_and_inverse() {
        let b = exp_se3(&Twist::from_array([0.3, -0.2, 0.7, 1.0, -2.0, 0.5]));
        assert_eq!(PoseSE3::identity().compose(&b), b);
        let e = b.compose(&b.inverse());
        assert!((as_matrix4(&e) - Matrix4::identity()).abs().max() < 1e-9);
        assert!((as_matrix4(&b.inverse().inverse()) - as_matrix4(&b)).abs().max() < 1e-12);
    }

    proptest! {
        #[test]
        fn exp_matches_oracle(xi in arb_twist(3.0)) {
            let diff = (as_matrix4(&exp_se3(&xi)) - expm(&xi.hat())).abs().max();
            prop_assert!(diff < 1e-8);
        }

        #[test]
        fn composition_stays_orthonormal(a in arb_twist(3.0), b in arb_twist(3.0)) {
            let p = exp_se3(&a).compose(&exp_se3(&b));
            prop_assert!(p.orthonormality_error() < 1e-9);
            prop_assert!(p.validate(POSE_TOLERANCE).is_ok());
        }

        #[test]
        fn composition_is_associative(a in arb_twist(2.0), b in arb_twist(2.0), c in arb_twist(2.0)) {
            let (a, b, c) = (exp_se3(&a), exp_se3(&b), exp_se3(&c));
            let l = as_matrix4(&a.compose(&b).compose(&c));
            let r = as_matrix4(&a.compose(&b.compose(&c)));
            prop_assert!((l - r).abs().max() < 1e-12);
        }

        #[test]
        fn pose_error_is_symmetric(a in arb_twist(2.0), b in arb_twist(2.0)) {
            let (a, b) = (exp_se3(&a), exp_se3(&b));
            let (t1, r1) = pose_error(&a, &b);
            let (t2, r2) = pose_error(&b, &a);
            prop_assert!((t1 - t2).abs() < 1e-12);
            prop_assert!((r1 - r2).abs() < 1e-9);
        }
    }

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn principal_ray_looks_down_negative_z() {
        let k = test_intrinsics();
        let r = ray_for_pixel(&k, &PoseSE3::identity(), k.cx, k.cy).unwrap();
        assert!((r.direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert_eq!(r.origin, Vec3::zeros());
    }

    #[test]
    fn translation_moves_origin_only() {
        let k = test_intrinsics();
        let t = Vec3::new(0.5, -1.0, 2.0);
        let a = ray_for_pixel(&k, &PoseSE3::identity(), 10.3, 40.2).unwrap();
        let b = ray_for_pixel(&k, &PoseSE3::from_translation(t), 10.3, 40.2).unwrap();
        assert_eq!(b.origin, t);
        assert!((a.direction - b.direction).norm() < 1e-15);
    }

    #[test]
    fn yawed_camera_rotates_rays() {
        let k = test_intrinsics();
        let pose = PoseSE3::from_axis_angle(&Vec3::y(), PI / 2.0, Vec3::zeros());
        let r = ray_for_pixel(&k, &pose, k.cx, k.cy).unwrap();
        let expected = pose.rotation * Vec3::new(0.0, 0.0, -1.0);
        assert!((r.direction - expected).norm() < 1e-12);
        // yaw +90 deg about y turns -z into -x
        assert!((r.direction - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let off = ray_for_pixel(&k, &pose, 5.5, 7.25).unwrap();
        let expected = pose.rotation * k.camera_direction(5.5, 7.25);
        assert!((off.direction - expected).norm() < 1e-12);
        assert!((off.direction.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let k = test_intrinsics();
        assert!(ray_for_pixel(&k, &PoseSE3::identity(), 64.0, 1.0).is_err());
        assert!(ray_for_pixel(&k, &PoseSE3::identity(), 1.0, -0.1).is_err());
    }

    #[test]
    fn pose_error_examples() {
        let a = exp_se3(&Twist::from_array([0.1, 0.2, -0.3, 1.0, 1.0, 1.0]));
        assert_eq!(pose_error(&a, &a).0, 0.0);
        assert!(pose_error(&a, &a).1 < 1e-6);
        let shifted = PoseSE3 {
            rotation: a.rotation,
            translation: a.translation + Vec3::new(3.0, 4.0, 0.0),
        };
        let (t, r) = pose_error(&a, &shifted);
        assert!((t - 5.0).abs() < 1e-12);
        assert!(r < 1e-6);
        let axis = Vec3::new(0.3, -0.8, 0.5);
        let rot = PoseSE3::from_axis_angle(&axis, 10f64.to_radians(), Vec3::zeros());
        let b = PoseSE3 {
            rotation: rot.rotation * a.rotation,
            translation: a.translation,
        };
        let (t, r) = pose_error(&a, &b);
        assert!(t < 1e-12);
        assert!((r - 10.0).abs() < 1e-6);
    }

    #[test]
    fn row_major_roundtrip_and_validation() {
        let a = exp_se3(&Twist::from_array([0.4, 0.1, -0.2, 0.5, 0.0, 2.0]));
        let b = PoseSE3::from_row_major(&a.to_row_major()).unwrap();
        assert_eq!(a, b);
        let mut bad = a.to_row_major();
        bad[0] *= 1.1;
        assert!(PoseSE3::from_row_major(&bad).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Vec3::new(1.2, 0.7, -0.4);
        let target = Vec3::new(0.1, -0.05, 0.2);
        let p = PoseSE3::look_at(&eye, &target, &Vec3::y()).unwrap();
        p.validate(POSE_TOLERANCE).unwrap();
        let dir = p.rotation * Vec3::new(0.0, 0.0, -1.0);
        let to_target = (target - eye).normalize();
        assert!((dir - to_target).norm() < 1e-12);
    }

    #[test]
    fn clip_ray_hits_and_misses() {
        let b = Aabb::new([-0.5; 3], [0.5; 3]).unwrap();
        let r = Ray {
            origin: Vec3::new(0.0, 0.0, 2.0),
            direction: Vec3::new(0.0, 0.0, -1.0),
        };
        let (t0, t1) = b.clip_ray(&r, 0.0, 10.0).unwrap();
        assert!((t0 - 1.5).abs() < 1e-12 && (t1 - 2.5).abs() < 1e-12);
        let miss = Ray {
            origin: Vec3::new(2.0, 0.0, 2.0),
            direction: Vec3::new(0.0, 0.0, -1.0),
        };
        assert!(b.clip_ray(&miss, 0.0, 10.0).is_none());
    }
}
