//! Pixel unprojection and world anchoring.
//!
//! Convention: right-handed camera space looking down -z with +y up; pixel
//! origin at the top-left corner with pixel centers at +0.5. NDC has +y up.

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::decode::{CoordSpace, Detection};
use crate::error::{Error, Result};
use crate::frame::{CameraIntrinsics, CameraPose, PoseBuffer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray3D {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray3D {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum PlacementPolicy {
    #[default]
    RayOnly,
    FixedDepth(f64),
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
    },
}

impl PlacementPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            PlacementPolicy::RayOnly => Ok(()),
            PlacementPolicy::FixedDepth(d) if *d > 0.0 && d.is_finite() => Ok(()),
            PlacementPolicy::FixedDepth(d) => Err(Error::Config(format!("placement depth must be positive, got {d}"))),
            PlacementPolicy::Plane { normal, .. } if normal.norm() > 0.0 => Ok(()),
            PlacementPolicy::Plane { .. } => Err(Error::Config("plane normal must be non-zero".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor3D {
    pub ray: Ray3D,
    pub point: Option<Vector3<f64>>,
    pub detection: Detection,
    pub acquisition_timestamp_ns: u64,
}

/// Serialized anchor fields appended to a detection record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[f64; 3]>,
    pub timestamp_ns: u64,
}

impl From<&Anchor3D> for AnchorRecord {
    fn from(a: &Anchor3D) -> Self {
        Self {
            origin: a.ray.origin.into(),
            direction: a.ray.direction.into(),
            point: a.point.map(Into::into),
            timestamp_ns: a.acquisition_timestamp_ns,
        }
    }
}

/// Camera-space unit direction through the center of pixel `(u, v)`.
pub fn unproject(pixel: (f64, f64), intrinsics: &CameraIntrinsics) -> Result<Vector3<f64>> {
    let (u, v) = pixel;
    let (w, h) = (intrinsics.image_width as f64, intrinsics.image_height as f64);
    if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
        return Err(Error::Geometry(format!("pixel ({u}, {v}) outside {w}x{h} image")));
    }
    let ndc_x = 2.0 * (u + 0.5) / w - 1.0;
    let ndc_y = 1.0 - 2.0 * (v + 0.5) / h;
    unproject_ndc(ndc_x, ndc_y, &intrinsics.projection)
}

/// Unprojects the NDC points on the near and far planes and takes the
/// direction between them, which holds for perspective and orthographic
/// projections alike.
fn unproject_ndc(ndc_x: f64, ndc_y: f64, projection: &Matrix4<f64>) -> Result<Vector3<f64>> {
    let inverse = projection
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Geometry("projection matrix is singular".into()))?;
    let point = |z: f64| -> Result<Vector3<f64>> {
        let p = inverse * Vector4::new(ndc_x, ndc_y, z, 1.0);
        if p.w.abs() < 1e-15 {
            return Err(Error::Geometry("unprojected point lies at infinity".into()));
        }
        Ok(p.xyz() / p.w)
    };
    let dir = point(1.0)? - point(-1.0)?;
    let norm = dir.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Geometry("degenerate unprojected direction".into()));
    }
    Ok(dir / norm)
}

/// Pixel coordinates (pixel-center convention) of a camera-space point.
pub fn project(point_cam: &Vector3<f64>, intrinsics: &CameraIntrinsics) -> Result<(f64, f64)> {
    let clip = intrinsics.projection * point_cam.push(1.0);
    if clip.w.abs() < 1e-15 {
        return Err(Error::Geometry("point projects to infinity".into()));
    }
    let (ndc_x, ndc_y) = (clip.x / clip.w, clip.y / clip.w);
    let (w, h) = (intrinsics.image_width as f64, intrinsics.image_height as f64);
    Ok(((ndc_x + 1.0) * w / 2.0 - 0.5, (1.0 - ndc_y) * h / 2.0 - 0.5))
}

pub fn to_world(direction_cam: &Vector3<f64>, pose: &CameraPose) -> Ray3D {
    let d = pose.rotation() * direction_cam;
    Ray3D { origin: pose.translation(), direction: d / d.norm() }
}

/// Places a full-frame detection in the world using the pose recorded when
/// its frame was captured, never the newest one.
pub fn anchor_detection(
    det: &Detection,
    frame_timestamp_ns: u64,
    intrinsics: &CameraIntrinsics,
    poses: &PoseBuffer,
    tolerance_ns: u64,
    policy: &PlacementPolicy,
) -> Result<Anchor3D> {
    if det.space != CoordSpace::FullFrame {
        return Err(Error::Geometry("anchoring needs full-frame coordinates".into()));
    }
    let (w, h) = (intrinsics.image_width as f64, intrinsics.image_height as f64);
    let b = &det.bbox;
    if b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h {
        return Err(Error::Geometry(format!("box {b:?} leaves the {w}x{h} image")));
    }
    let pose = poses.pose_at(frame_timestamp_ns, tolerance_ns)?;
    // box center is continuous; pixel index u covers [u, u + 1)
    let (cx, cy) = b.center();
    let direction_cam = unproject_ndc(2.0 * cx / w - 1.0, 1.0 - 2.0 * cy / h, &intrinsics.projection)?;
    let ray = to_world(&direction_cam, &pose);
    let point = match *policy {
        PlacementPolicy::RayOnly => None,
        PlacementPolicy::FixedDepth(d) => Some(ray.at(d)),
        PlacementPolicy::Plane { point, normal } => Some(intersect_plane(&ray, &point, &normal)?),
    };
    Ok(Anchor3D { ray, point, detection: *det, acquisition_timestamp_ns: frame_timestamp_ns })
}

pub fn intersect_plane(ray: &Ray3D, point: &Vector3<f64>, normal: &Vector3<f64>) -> Result<Vector3<f64>> {
    let denom = normal.dot(&ray.direction);
    if denom.abs() < 1e-9 {
        return Err(Error::NoIntersection);
    }
    let t = normal.dot(&(point - ray.origin)) / denom;
    if t <= 0.0 {
        return Err(Error::NoIntersection);
    }
    Ok(ray.at(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::BBox;
    use approx::assert_abs_diff_eq;
    use nalgebra::Rotation3;
    use std::f64::consts::FRAC_PI_2;

    fn intrinsics(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::perspective(FRAC_PI_2, w, h, 0.1, 100.0)
    }

    fn full_frame(x: f64, y: f64, w: f64, h: f64) -> Detection {
        Detection { bbox: BBox::new(x, y, w, h), space: CoordSpace::FullFrame, category: 0, score: 0.9 }
    }

    #[test]
    fn principal_point_looks_forward() {
        // even dimensions: the principal point is the corner shared by the 4 central pixels;
        // an odd image has a true central pixel
        let k = intrinsics(101, 101);
        let d = unproject((50.0, 50.0), &k).unwrap();
        assert_abs_diff_eq!(d, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn mirrored_pixels_mirror_in_x() {
        let k = intrinsics(640, 480);
        let a = unproject((100.0, 37.0), &k).unwrap();
        let b = unproject((639.0 - 100.0, 37.0), &k).unwrap();
        assert_abs_diff_eq!(a.x, -b.x, epsilon = 1e-12);
        assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
        assert_abs_diff_eq!(a.z, b.z, epsilon = 1e-12);
    }

    #[test]
    fn top_center_at_ninety_degrees() {
        let k = intrinsics(101, 101);
        let d = unproject((50.0, 0.0), &k).unwrap();
        // the top pixel center sits half a pixel below the frustum edge
        let t = 1.0 - 1.0 / 101.0;
        let expected = Vector3::new(0.0, t, -1.0).normalize();
        assert_abs_diff_eq!(d, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(d, Vector3::new(0.0, 1.0, -1.0).normalize(), epsilon = 5e-3);
        let (u, v) = project(&d, &k).unwrap();
        assert_abs_diff_eq!(u, 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn out_of_bounds_and_singular() {
        let k = intrinsics(10, 10);
        assert!(unproject((10.0, 0.0), &k).is_err());
        assert!(unproject((-0.1, 0.0), &k).is_err());
        let singular = CameraIntrinsics::new(Matrix4::zeros(), 10, 10);
        assert!(matches!(unproject((1.0, 1.0), &singular), Err(Error::Geometry(_))));
    }

    #[test]
    fn to_world_cases() {
        let d = Vector3::new(0.3, -0.2, -1.0).normalize();
        let r = to_world(&d, &CameraPose::identity(0));
        assert_eq!(r.origin, Vector3::zeros());
        assert_abs_diff_eq!(r.direction, d, epsilon = 1e-15);

        let p = CameraPose::from_parts(Rotation3::identity(), Vector3::new(1.0, 2.0, 3.0), 0);
        let r = to_world(&d, &p);
        assert_eq!(r.origin, Vector3::new(1.0, 2.0, 3.0));
        assert_abs_diff_eq!(r.direction, d, epsilon = 1e-15);

        let yaw = CameraPose::from_parts(
            Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI),
            Vector3::zeros(),
            0,
        );
        let r = to_world(&d, &yaw);
        assert_abs_diff_eq!(r.direction, Vector3::new(-d.x, d.y, -d.z), epsilon = 1e-12);
    }

    #[test]
    fn fixed_depth_on_principal_point() {
        let k = intrinsics(1280, 720);
        let mut poses = PoseBuffer::default();
        poses.push(CameraPose::identity(0)).unwrap();
        let det = full_frame(620.0, 340.0, 40.0, 40.0);
        let a = anchor_detection(&det, 0, &k, &poses, 100_000_000, &PlacementPolicy::FixedDepth(2.0)).unwrap();
        assert_abs_diff_eq!(a.point.unwrap(), Vector3::new(0.0, 0.0, -2.0), epsilon = 1e-12);
        let ray_only = anchor_detection(&det, 0, &k, &poses, 100_000_000, &PlacementPolicy::RayOnly).unwrap();
        assert!(ray_only.point.is_none());
        assert_eq!(ray_only.ray, a.ray);
    }

    #[test]
    fn anchoring_uses_acquisition_pose() {
        let k = intrinsics(1280, 720);
        let mut poses = PoseBuffer::default();
        poses.push(CameraPose::identity(0)).unwrap();
        let det = full_frame(100.0, 100.0, 50.0, 80.0);
        let before = anchor_detection(&det, 0, &k, &poses, 10_000_000, &PlacementPolicy::FixedDepth(1.5)).unwrap();
        let turned = CameraPose::from_parts(
            Rotation3::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2),
            Vector3::zeros(),
            50_000_000,
        );
        poses.push(turned).unwrap();
        let after = anchor_detection(&det, 0, &k, &poses, 10_000_000, &PlacementPolicy::FixedDepth(1.5)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn plane_and_errors() {
        let k = intrinsics(100, 100);
        let mut poses = PoseBuffer::default();
        poses.push(CameraPose::identity(0)).unwrap();
        let det = full_frame(30.0, 40.0, 10.0, 10.0);
        let plane = PlacementPolicy::Plane { point: Vector3::new(0.0, 0.0, -3.0), normal: Vector3::new(0.0, 0.0, 1.0) };
        let a = anchor_detection(&det, 0, &k, &poses, 1, &plane).unwrap();
        let p = a.point.unwrap();
        assert!((p.z + 3.0).abs() < 1e-9);

        let behind = PlacementPolicy::Plane { point: Vector3::new(0.0, 0.0, 3.0), normal: Vector3::new(0.0, 0.0, 1.0) };
        assert!(matches!(anchor_detection(&det, 0, &k, &poses, 1, &behind), Err(Error::NoIntersection)));
        let parallel =
            PlacementPolicy::Plane { point: Vector3::new(0.0, -1.0, 0.0), normal: Vector3::new(1.0, 0.0, 0.0) };
        let centered = full_frame(45.0, 45.0, 10.0, 10.0);
        assert!(matches!(anchor_detection(&centered, 0, &k, &poses, 1, &parallel), Err(Error::NoIntersection)));
        assert!(matches!(
            anchor_detection(&det, 500_000_000, &k, &poses, 100_000_000, &PlacementPolicy::RayOnly),
            Err(Error::StalePose { .. })
        ));
        let outside = full_frame(95.0, 0.0, 10.0, 10.0);
        assert!(anchor_detection(&outside, 0, &k, &poses, 1, &PlacementPolicy::RayOnly).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(PlacementPolicy::FixedDepth(0.0).validate().is_err());
        assert!(PlacementPolicy::Plane { point: Vector3::zeros(), normal: Vector3::zeros() }.validate().is_err());
        assert!(PlacementPolicy::FixedDepth(2.0).validate().is_ok());
    }
}
