//! Pose and intrinsics sidecar files used for anchoring.
//!
//! ```toml
//! frame_timestamp_ns = 1000000
//! tolerance_ns = 100000000        # optional
//!
//! [intrinsics]
//! width = 640
//! height = 480
//! projection = [ ... 16 values, row-major ... ]
//! # or instead of projection:
//! # fov_y_deg = 60.0
//! # near = 0.1
//! # far = 100.0
//!
//! [[poses]]
//! timestamp_ns = 0
//! camera_to_world = [ ... 16 values, row-major ... ]
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use edgedet::frame::{CameraIntrinsics, CameraPose, PoseBuffer, DEFAULT_POSE_CAPACITY, DEFAULT_POSE_TOLERANCE_NS};
use edgedet::geometry::PlacementPolicy;
use edgedet::pipeline::AnchorSetup;
use nalgebra::{Matrix4, Vector3};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsEntry {
    width: usize,
    height: usize,
    projection: Option<Vec<f64>>,
    fov_y_deg: Option<f64>,
    #[serde(default = "default_near")]
    near: f64,
    #[serde(default = "default_far")]
    far: f64,
}

fn default_near() -> f64 {
    0.1
}

fn default_far() -> f64 {
    100.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseEntry {
    timestamp_ns: u64,
    camera_to_world: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFile {
    frame_timestamp_ns: Option<u64>,
    tolerance_ns: Option<u64>,
    intrinsics: IntrinsicsEntry,
    #[serde(default)]
    poses: Vec<PoseEntry>,
}

#[derive(Debug, Clone)]
pub struct Sidecar {
    pub frame_timestamp_ns: u64,
    pub setup: AnchorSetup,
}

fn row_major(values: &[f64], what: &str) -> Result<Matrix4<f64>> {
    if values.len() != 16 {
        bail!("{what} needs 16 values, found {}", values.len());
    }
    Ok(Matrix4::from_row_slice(values))
}

pub fn read_sidecar(path: &Path, policy: PlacementPolicy) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: SidecarFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let i = &file.intrinsics;
    let intrinsics = match (&i.projection, i.fov_y_deg) {
        (Some(p), None) => CameraIntrinsics::new(row_major(p, "projection")?, i.width, i.height),
        (None, Some(fov)) => {
            if !(fov > 0.0 && fov < 180.0 && i.near > 0.0 && i.far > i.near && i.width > 0 && i.height > 0) {
                bail!("{}: need 0 < fov_y_deg < 180, 0 < near < far and a non-empty image", path.display());
            }
            CameraIntrinsics::perspective(fov.to_radians(), i.width, i.height, i.near, i.far)
        }
        _ => bail!("{}: give exactly one of intrinsics.projection and intrinsics.fov_y_deg", path.display()),
    };
    let mut poses = PoseBuffer::with_capacity(DEFAULT_POSE_CAPACITY.max(file.poses.len()));
    for p in &file.poses {
        poses.push(CameraPose::from_row_major(&p.camera_to_world, p.timestamp_ns)?)?;
    }
    let frame_timestamp_ns = match file.frame_timestamp_ns.or_else(|| poses.iter().last().map(|p| p.timestamp_ns())) {
        Some(t) => t,
        None => bail!("{}: no poses and no frame_timestamp_ns", path.display()),
    };
    let mut setup = AnchorSetup::new(intrinsics, poses, policy);
    setup.tolerance_ns = file.tolerance_ns.unwrap_or(DEFAULT_POSE_TOLERANCE_NS);
    Ok(Sidecar { frame_timestamp_ns, setup })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneFile {
    point: [f64; 3],
    normal: [f64; 3],
}

/// Parses `ray`, `depth:<meters>` or `plane:<file>` (TOML or JSON with
/// `point` and `normal`).
pub fn parse_policy(text: &str) -> Result<PlacementPolicy> {
    let policy = match text.split_once(':') {
        None if text == "ray" => PlacementPolicy::RayOnly,
        Some(("depth", d)) => PlacementPolicy::FixedDepth(d.trim().parse().with_context(|| format!("depth {d:?}"))?),
        Some(("plane", file)) => {
            let body = std::fs::read_to_string(file).with_context(|| format!("reading plane file {file}"))?;
            let plane: PlaneFile = if file.ends_with(".json") {
                serde_json::from_str(&body).with_context(|| format!("parsing {file}"))?
            } else {
                toml::from_str(&body).with_context(|| format!("parsing {file}"))?
            };
            PlacementPolicy::Plane { point: Vector3::from(plane.point), normal: Vector3::from(plane.normal) }
        }
        _ => bail!("unknown placement policy {text:?}; use ray, depth:<m> or plane:<file>"),
    };
    policy.validate()?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: &str = "[1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]";

    #[test]
    fn reads_poses_and_perspective() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.toml");
        let text = format!(
            "frame_timestamp_ns = 5\n[intrinsics]\nwidth = 64\nheight = 48\nfov_y_deg = 90.0\n\
             [[poses]]\ntimestamp_ns = 0\ncamera_to_world = {IDENTITY}\n\
             [[poses]]\ntimestamp_ns = 10\ncamera_to_world = {IDENTITY}\n"
        );
        std::fs::write(&path, text).unwrap();
        let s = read_sidecar(&path, PlacementPolicy::RayOnly).unwrap();
        assert_eq!(s.frame_timestamp_ns, 5);
        assert_eq!(s.setup.poses.len(), 2);
        assert_eq!(s.setup.intrinsics.image_width, 64);
    }

    #[test]
    fn rejects_out_of_order_and_ambiguous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.toml");
        let text = format!(
            "[intrinsics]\nwidth = 4\nheight = 4\nfov_y_deg = 60.0\n\
             [[poses]]\ntimestamp_ns = 10\ncamera_to_world = {IDENTITY}\n\
             [[poses]]\ntimestamp_ns = 0\ncamera_to_world = {IDENTITY}\n"
        );
        std::fs::write(&path, text).unwrap();
        assert!(read_sidecar(&path, PlacementPolicy::RayOnly).is_err());
        std::fs::write(
            &path,
            format!("[intrinsics]\nwidth = 4\nheight = 4\nfov_y_deg = 60.0\nprojection = {IDENTITY}\n"),
        )
        .unwrap();
        assert!(read_sidecar(&path, PlacementPolicy::RayOnly).is_err());
    }

    #[test]
    fn policies() {
        assert_eq!(parse_policy("ray").unwrap(), PlacementPolicy::RayOnly);
        assert_eq!(parse_policy("depth:2.5").unwrap(), PlacementPolicy::FixedDepth(2.5));
        assert!(parse_policy("depth:-1").is_err());
        assert!(parse_policy("orbit").is_err());
        let dir = tempfile::tempdir().unwrap();
        let plane = dir.path().join("floor.toml");
        std::fs::write(&plane, "point = [0, -1.5, 0]\nnormal = [0, 1, 0]\n").unwrap();
        let p = parse_policy(&format!("plane:{}", plane.display())).unwrap();
        assert!(matches!(p, PlacementPolicy::Plane { .. }));
    }
}
