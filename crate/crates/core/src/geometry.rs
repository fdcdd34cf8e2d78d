//! Pinhole cameras, the orbit rig, and mirror-pose algebra.
//!
//! Camera frames follow the OpenCV convention: +x right, +y down, +z forward.
//! Pixel centres sit on integer coordinates, so a `W`-pixel-wide image spans
//! `[0, W-1]` and the symmetric principal point is `(W-1)/2`.
//!
//! The world symmetry plane is `x = 0`; all rig cameras orbit the origin.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Default orbit radius of the camera rig.
pub const RIG_RADIUS: f64 = 3.0;

/// Focal length in pixels per pixel of image width for the default rig.
pub const DEFAULT_FOCAL_SCALE: f64 = 1.6;

/// Pinhole calibration with square pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::InvalidArgument(format!("focal must be > 0, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("resolution must be nonzero".into()));
        }
        let inside = |c: f64, n: usize| c >= 0.0 && c <= (n - 1) as f64;
        if !inside(cx, width) || !inside(cy, height) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            focal,
            cx,
            cy,
            width,
            height,
        })
    }

    /// The rig's calibration at a square resolution, principal point centred.
    pub fn for_resolution(side: usize) -> Self {
        let c = (side as f64 - 1.0) * 0.5;
        Self {
            focal: DEFAULT_FOCAL_SCALE * side as f64,
            cx: c,
            cy: c,
            width: side,
            height: side,
        }
    }

    /// Calibration of the same camera after resampling the image by `factor`
    /// (e.g. `0.5` for 2x area downsampling).
    pub fn scaled(&self, factor: f64) -> Self {
        let w = (self.width as f64 * factor).round() as usize;
        let h = (self.height as f64 * factor).round() as usize;
        Self {
            focal: self.focal * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            width: w,
            height: h,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame ray direction through a pixel, with unit forward component.
    #[inline]
    pub fn camera_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0)
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    camera_to_world: Matrix4<f64>,
}

const RIGID_TOL: f64 = 1e-9;

impl Pose {
    /// Validates that `m` is a proper rigid transform.
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("pose has non-finite entries".into()));
        }
        let last = m.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > RIGID_TOL {
            return Err(Error::InvalidArgument("pose last row must be (0,0,0,1)".into()));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > RIGID_TOL {
            return Err(Error::InvalidArgument(format!("rotation not orthonormal (err {err:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > RIGID_TOL {
            return Err(Error::InvalidArgument(format!("rotation det {det} != +1")));
        }
        Ok(Self { camera_to_world: m })
    }

    pub fn from_rotation_translation(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.camera_to_world
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.camera_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn position(&self) -> Point3 {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.camera_to_world.fixed_view::<3, 1>(0, 2).into_owned()
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = &self.camera_to_world;
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        Self::new(Matrix4::from_fn(|i, j| rows[i][j]))
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        Pose::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Camera on a sphere about the origin, looking at it, with world +y up.
///
/// Azimuth `yaw` is measured about +y from +z toward +x; `pitch` raises the
/// camera toward +y.
pub fn look_at_pose(yaw: f64, pitch: f64, radius: f64) -> Result<Pose> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be > 0, got {radius}")));
    }
    let position = Vector3::new(
        radius * yaw.sin() * pitch.cos(),
        radius * pitch.sin(),
        radius * yaw.cos() * pitch.cos(),
    );
    let forward = -position / radius;
    let right = forward.cross(&Vector3::y());
    let n = right.norm();
    if pitch.abs() >= std::f64::consts::FRAC_PI_2 || n < 1e-9 {
        return Err(Error::DegenerateCamera(format!(
            "up direction parallel to view direction (pitch {pitch})"
        )));
    }
    let right = right / n;
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    Pose::from_rotation_translation(r, position)
}

/// The pose that sees the `x = 0` mirror image of what `p` sees, with image
/// columns reversed: `S * C * H` with `S = H = diag(-1, 1, 1, 1)`.
pub fn mirror_pose(p: &Pose) -> Pose {
    let mut m = p.camera_to_world;
    // S negates row 0, H negates column 0; the (0,0) entry is negated twice.
    for j in 0..4 {
        m[(0, j)] = -m[(0, j)];
    }
    for i in 0..4 {
        m[(i, 0)] = -m[(i, 0)];
    }
    Pose { camera_to_world: m }
}

/// Azimuth of the camera centre about the world y axis, in `(-pi, pi]`.
pub fn yaw_of(p: &Pose) -> Result<f64> {
    let c = p.position();
    if c.x.hypot(c.z) < 1e-12 {
        return Err(Error::DegenerateCamera("camera centre on the y axis".into()));
    }
    Ok(c.x.atan2(c.z))
}

/// Elevation of the camera centre above the xz plane.
pub fn pitch_of(p: &Pose) -> f64 {
    let c = p.position();
    c.y.atan2(c.x.hypot(c.z))
}

/// Pinhole projection; returns the pixel and the camera-frame forward depth.
pub fn project(k: &Intrinsics, p: &Pose, x: &Point3) -> Result<((f64, f64), f64)> {
    let xc = p.rotation().transpose() * (x - p.position());
    if xc.z <= 1e-9 {
        return Err(Error::BehindCamera { depth: xc.z });
    }
    let u = k.cx + k.focal * xc.x / xc.z;
    let v = k.cy + k.focal * xc.y / xc.z;
    Ok(((u, v), xc.z))
}

/// Inverse of [`project`]: the world point at `depth` along the pixel's ray.
pub fn backproject(k: &Intrinsics, p: &Pose, pixel: (f64, f64), depth: f64) -> Result<Point3> {
    if !(depth > 0.0) {
        return Err(Error::InvalidArgument(format!("depth must be > 0, got {depth}")));
    }
    let xc = k.camera_ray(pixel.0, pixel.1) * depth;
    Ok(p.rotation() * xc + p.position())
}

/// Hyper-parameters of the yaw-adaptive mirror weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorWeightParams {
    pub sigma: f64,
    pub mu: f64,
    pub clamp_k: f64,
}

impl Default for MirrorWeightParams {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            mu: 0.0,
            clamp_k: 0.85,
        }
    }
}

impl MirrorWeightParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.clamp_k > 0.0 && self.clamp_k < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "clamp_k must lie in (0,1), got {}",
                self.clamp_k
            )));
        }
        Ok(())
    }

    /// Peak-normalised Gaussian of the yaw, 1 at `mu`.
    pub fn envelope(&self, yaw: f64) -> f64 {
        let d = yaw - self.mu;
        (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Weight of the mirrored view: `1 - E(yaw)` when `E(yaw) <= k`, else 0.
pub fn mirror_weight(yaw: f64, params: &MirrorWeightParams) -> f64 {
    let e = params.envelope(yaw);
    if e <= params.clamp_k {
        1.0 - e
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn frontal_rig() {
        let p = look_at_pose(0.0, 0.0, 3.0).unwrap();
        assert!((p.position() - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        assert!((p.forward() - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn quarter_turn() {
        let p = look_at_pose(FRAC_PI_2, 0.0, 3.0).unwrap();
        assert!((p.position() - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((p.forward() - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn look_at_is_orthonormal() {
        let r = look_at_pose(0.4, 0.2, 3.0).unwrap().rotation();
        // Oracle: compose yaw and pitch rotations explicitly and compare.
        let ry = Matrix3::new(0.4f64.cos(), 0.0, 0.4f64.sin(), 0.0, 1.0, 0.0, -0.4f64.sin(), 0.0, 0.4f64.cos());
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.2f64.cos(), 0.2f64.sin(), 0.0, -0.2f64.sin(), 0.2f64.cos());
        // frontal camera frame: right=+x, down=-y, forward=-z
        let base = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let oracle = ry * rx * base;
        assert!((r - oracle).abs().max() < 1e-12);
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn degenerate_pitch_rejected() {
        assert!(matches!(
            look_at_pose(0.3, FRAC_PI_2, 3.0),
            Err(Error::DegenerateCamera(_))
        ));
        assert!(look_at_pose(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn mirror_negates_yaw() {
        let p = look_at_pose(0.5, 0.0, 3.0).unwrap();
        let m = mirror_pose(&p);
        assert!(close(yaw_of(&m).unwrap(), -0.5, 1e-12));
        assert!(close(m.rotation().determinant(), 1.0, 1e-12));
        // The mirrored pose equals the rig pose at the opposite yaw.
        let q = look_at_pose(-0.5, 0.0, 3.0).unwrap();
        assert!((m.matrix() - q.matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn yaw_examples() {
        let p = look_at_pose(0.7, 0.0, 3.0).unwrap();
        assert!(close(yaw_of(&p).unwrap(), 0.7, 1e-12));
        assert!(close(yaw_of(&mirror_pose(&p)).unwrap(), -0.7, 1e-12));
        let q = look_at_pose(0.0, 0.3, 3.0).unwrap();
        assert!(close(yaw_of(&q).unwrap(), 0.0, 1e-12));
        assert!(close(pitch_of(&q), 0.3, 1e-12));
        let top = Pose::from_rotation_translation(Matrix3::identity(), Vector3::new(0.0, 3.0, 0.0)).unwrap();
        assert!(yaw_of(&top).is_err());
        assert!(close(yaw_of(&look_at_pose(PI, 0.0, 3.0).unwrap()).unwrap(), PI, 1e-12));
    }

    #[test]
    fn project_examples() {
        let k = Intrinsics::new(64.0, 32.0, 32.0, 64, 64).unwrap();
        let p = look_at_pose(0.0, 0.0, 3.0).unwrap();
        let ((u, v), d) = project(&k, &p, &Point3::zeros()).unwrap();
        assert_eq!((u, v, d), (32.0, 32.0, 3.0));
        // World +x appears on the image right for the frontal camera.
        let ((u, v), _) = project(&k, &p, &Point3::new(0.5, 0.0, 0.0)).unwrap();
        assert!(close(u, 32.0 + 64.0 * 0.5 / 3.0, 1e-12));
        assert!(close(v, 32.0, 1e-12));
        // World +y appears toward the image top (smaller row).
        let ((_, v), _) = project(&k, &p, &Point3::new(0.0, 0.5, 0.0)).unwrap();
        assert!(v < 32.0);
        let behind = Point3::new(0.0, 0.0, 4.0);
        assert!(matches!(project(&k, &p, &behind), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn backproject_examples() {
        let k = Intrinsics::new(64.0, 32.0, 32.0, 64, 64).unwrap();
        let p = look_at_pose(0.3, 0.1, 3.0).unwrap();
        let on_axis = backproject(&k, &p, (32.0, 32.0), 2.0).unwrap();
        assert!((on_axis - (p.position() + 2.0 * p.forward())).norm() < 1e-12);
        // Corner pixel: point lies on the ray o + s * R * ((0-cx)/f, (0-cy)/f, 1).
        let corner = backproject(&k, &p, (0.0, 0.0), 2.0).unwrap();
        let ray = p.rotation() * Vector3::new(-0.5, -0.5, 1.0);
        let s = (corner - p.position()).dot(&ray) / ray.norm_squared();
        assert!(close(s, 2.0, 1e-12));
        assert!((p.position() + s * ray - corner).norm() < 1e-12);
        assert!(backproject(&k, &p, (1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn mirror_weight_examples() {
        let params = MirrorWeightParams::default();
        assert_eq!(mirror_weight(0.0, &params), 0.0);
        let w = mirror_weight(PI / 3.0, &params);
        let expected = 1.0 - (-(PI / 3.0).powi(2) / (2.0 * 0.09)).exp();
        assert!(close(w, expected, 1e-15));
        assert!(close(w, 0.9977, 1e-4));
        // Ê(y) = k exactly at y = sigma * sqrt(-2 ln k).
        let y = params.sigma * (-2.0 * params.clamp_k.ln()).sqrt();
        let at = mirror_weight(y * (1.0 + 1e-12), &params);
        assert!(close(at, 0.15, 1e-9));
        // Defaults: clamped to 0 up to ~9.8 degrees, > 0.9 beyond 45 degrees.
        assert_eq!(mirror_weight(9.5f64.to_radians(), &params), 0.0);
        assert!(mirror_weight(10f64.to_radians(), &params) < 0.16);
        assert!(mirror_weight(45f64.to_radians(), &params) > 0.9);
    }

    #[test]
    fn intrinsics_validation_and_scaling() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 5.0, 1.0, 4, 4).is_err());
        let k = Intrinsics::for_resolution(128);
        let half = k.scaled(0.5);
        assert_eq!(half, Intrinsics::for_resolution(64));
    }

    #[test]
    fn pose_json_roundtrip() {
        let p = look_at_pose(0.2, -0.1, 3.0).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        assert!(serde_json::from_str::<Pose>("[[1,0,0,0],[0,1,0,0],[0,0,-1,0],[0,0,0,1]]").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_pose() -> impl Strategy<Value = Pose> {
            (-PI..PI, -1.4f64..1.4, 0.5f64..10.0).prop_map(|(y, p, r)| look_at_pose(y, p, r).unwrap())
        }

        proptest! {
            #[test]
            fn mirror_is_proper_involution(p in any_pose()) {
                let m = mirror_pose(&p);
                let r = m.rotation();
                prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
                prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
                prop_assert!((mirror_pose(&m).matrix() - p.matrix()).abs().max() < 1e-12);
            }

            #[test]
            fn project_backproject_roundtrip(
                p in any_pose(),
                u in 0.0f64..63.0, v in 0.0f64..63.0, d in 0.1f64..10.0,
            ) {
                let k = Intrinsics::for_resolution(64);
                let x = backproject(&k, &p, (u, v), d).unwrap();
                let ((u2, v2), d2) = project(&k, &p, &x).unwrap();
                prop_assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9 && (d - d2).abs() < 1e-9);
            }

            #[test]
            fn mirror_weight_symmetric_and_monotone(a in 0.0f64..PI, b in 0.0f64..PI, s in 0.05f64..1.0) {
                let params = MirrorWeightParams { sigma: s, mu: 0.0, clamp_k: 0.85 };
                prop_assert_eq!(mirror_weight(a, &params), mirror_weight(-a, &params));
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(mirror_weight(lo, &params) <= mirror_weight(hi, &params));
            }
        }
    }
}
