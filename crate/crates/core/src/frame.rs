//! Frames, camera poses, and the acquisition-side plumbing that hands them to
//! the detector: a timestamp-indexed pose history and a latest-wins mailbox.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, RwLock};
use std::time::Duration;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_POSE_CAPACITY: usize = 128;
/// Maximum gap between a frame timestamp and the pose paired with it.
pub const DEFAULT_POSE_TOLERANCE_NS: u64 = 100_000_000;

/// An RGB frame, 8 bits per channel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFrame {
    frame_id: u64,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    timestamp_ns: u64,
}

impl ImageFrame {
    pub fn new(frame_id: u64, width: usize, height: usize, pixels: Vec<u8>, timestamp_ns: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("frame must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "pixel buffer holds {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(Self { frame_id, width, height, pixels, timestamp_ns })
    }

    /// A frame filled with a single color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(0, width, height, pixels, 0)
    }

    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn timestamp_ns(&self) -> u64 {
        self.timestamp_ns
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Camera-to-world transform valid at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    camera_to_world: Matrix4<f64>,
    timestamp_ns: u64,
}

impl CameraPose {
    pub fn new(camera_to_world: Matrix4<f64>, timestamp_ns: u64) -> Result<Self> {
        let m = &camera_to_world;
        if m.row(3).iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::Geometry("camera_to_world last row must be [0, 0, 0, 1]".into()));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let off = (r.transpose() * r - Matrix3::identity()).amax();
        if off >= 1e-6 {
            return Err(Error::Geometry(format!("rotation block is not orthonormal (deviation {off:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Geometry(format!("rotation determinant is {det}, expected 1")));
        }
        Ok(Self { camera_to_world, timestamp_ns })
    }

    pub fn identity(timestamp_ns: u64) -> Self {
        Self { camera_to_world: Matrix4::identity(), timestamp_ns }
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>, timestamp_ns: u64) -> Self {
        let mut m = rotation.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { camera_to_world: m, timestamp_ns }
    }

    /// Builds a pose from 16 row-major values.
    pub fn from_row_major(values: &[f64], timestamp_ns: u64) -> Result<Self> {
        Self::new(matrix_from_row_major(values)?, timestamp_ns)
    }

    pub fn camera_to_world(&self) -> &Matrix4<f64> {
        &self.camera_to_world
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.camera_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn timestamp_ns(&self) -> u64 {
        self.timestamp_ns
    }
}

pub(crate) fn matrix_from_row_major(values: &[f64]) -> Result<Matrix4<f64>> {
    if values.len() != 16 {
        return Err(Error::Shape(format!("expected 16 matrix entries, got {}", values.len())));
    }
    Ok(Matrix4::from_row_slice(values))
}

/// Projection matrix plus the image size it applies to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub projection: Matrix4<f64>,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraIntrinsics {
    pub fn new(projection: Matrix4<f64>, image_width: usize, image_height: usize) -> Self {
        Self { projection, image_width, image_height }
    }

    /// Symmetric OpenGL-style perspective projection; the camera looks down -z.
    pub fn perspective(vertical_fov_rad: f64, image_width: usize, image_height: usize, near: f64, far: f64) -> Self {
        let aspect = image_width as f64 / image_height as f64;
        let projection = Matrix4::new_perspective(aspect, vertical_fov_rad, near, far);
        Self { projection, image_width, image_height }
    }
}

/// Bounded history of poses ordered by timestamp.
#[derive(Debug, Clone)]
pub struct PoseBuffer {
    capacity: usize,
    entries: VecDeque<CameraPose>,
}

impl Default for PoseBuffer {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_POSE_CAPACITY)
    }
}

impl PoseBuffer {
    pub fn with_capacity(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &CameraPose> {
        self.entries.iter()
    }

    pub fn push(&mut self, pose: CameraPose) -> Result<()> {
        if let Some(newest) = self.entries.back() {
            if pose.timestamp_ns < newest.timestamp_ns {
                return Err(Error::PoseOrdering { got: pose.timestamp_ns, newest: newest.timestamp_ns });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(pose);
        Ok(())
    }

    /// Nearest stored pose to `timestamp_ns`. Equidistant candidates resolve to
    /// the earlier one; among equal timestamps the first inserted wins.
    pub fn pose_at(&self, timestamp_ns: u64, tolerance_ns: u64) -> Result<CameraPose> {
        if self.entries.is_empty() {
            return Err(Error::NoPose);
        }
        let upper = self.entries.partition_point(|p| p.timestamp_ns < timestamp_ns);
        let mut best: Option<(u64, usize)> = None;
        if upper > 0 {
            let left_ts = self.entries[upper - 1].timestamp_ns;
            let first = self.entries.partition_point(|p| p.timestamp_ns < left_ts);
            best = Some((timestamp_ns - left_ts, first));
        }
        if upper < self.entries.len() {
            let gap = self.entries[upper].timestamp_ns - timestamp_ns;
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, upper));
            }
        }
        let (gap, idx) = best.expect("non-empty buffer has a neighbour");
        if gap > tolerance_ns {
            return Err(Error::StalePose { query_ns: timestamp_ns, gap_ns: gap, tolerance_ns });
        }
        Ok(self.entries[idx])
    }
}

/// Pose history shared between the acquisition thread and readers.
#[derive(Debug, Default)]
pub struct SharedPoseBuffer {
    inner: RwLock<PoseBuffer>,
}

impl SharedPoseBuffer {
    pub fn new(buffer: PoseBuffer) -> Self {
        Self { inner: RwLock::new(buffer) }
    }

    pub fn push(&self, pose: CameraPose) -> Result<()> {
        self.inner.write().expect("pose buffer lock poisoned").push(pose)
    }

    pub fn pose_at(&self, timestamp_ns: u64, tolerance_ns: u64) -> Result<CameraPose> {
        self.inner.read().expect("pose buffer lock poisoned").pose_at(timestamp_ns, tolerance_ns)
    }

    pub fn snapshot(&self) -> PoseBuffer {
        self.inner.read().expect("pose buffer lock poisoned").clone()
    }
}

/// Single-slot, latest-wins hand-off between a frame producer and the detector.
#[derive(Debug, Default)]
pub struct FrameMailbox {
    slot: Mutex<MailboxSlot>,
    ready: Condvar,
}

#[derive(Debug, Default)]
struct MailboxSlot {
    frame: Option<ImageFrame>,
    dropped: u64,
}

impl FrameMailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, frame: ImageFrame) {
        let mut slot = self.slot.lock().expect("mailbox lock poisoned");
        if slot.frame.replace(frame).is_some() {
            slot.dropped += 1;
        }
        self.ready.notify_one();
    }

    pub fn take_latest(&self) -> Option<ImageFrame> {
        self.slot.lock().expect("mailbox lock poisoned").frame.take()
    }

    /// Waits up to `timeout` for a frame to arrive.
    pub fn take_timeout(&self, timeout: Duration) -> Option<ImageFrame> {
        let slot = self.slot.lock().expect("mailbox lock poisoned");
        let (mut slot, _) =
            self.ready.wait_timeout_while(slot, timeout, |s| s.frame.is_none()).expect("mailbox lock poisoned");
        slot.frame.take()
    }

    /// Frames overwritten before anyone took them.
    pub fn dropped(&self) -> u64 {
        self.slot.lock().expect("mailbox lock poisoned").dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Identity,
    /// Constant velocity in world meters per second.
    Translate {
        velocity: [f64; 3],
    },
    /// Constant rotation about world +y, radians per second.
    Yaw {
        rate: f64,
    },
}

impl Trajectory {
    pub fn pose_at(&self, timestamp_ns: u64) -> CameraPose {
        let t = timestamp_ns as f64 * 1e-9;
        match *self {
            Trajectory::Identity => CameraPose::identity(timestamp_ns),
            Trajectory::Translate { velocity } => {
                CameraPose::from_parts(Rotation3::identity(), Vector3::from(velocity) * t, timestamp_ns)
            }
            Trajectory::Yaw { rate } => CameraPose::from_parts(
                Rotation3::from_axis_angle(&Vector3::y_axis(), rate * t),
                Vector3::zeros(),
                timestamp_ns,
            ),
        }
    }
}

/// Parameters of a deterministic stand-in camera stream.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub count: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
}

impl SyntheticSpec {
    pub fn new(width: usize, height: usize, fps: f64, count: usize, seed: u64) -> Self {
        Self { width, height, fps, count, seed, trajectory: Trajectory::Identity }
    }
}

struct Blob {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    rgb: [u8; 3],
    dx: i64,
}

/// Seeded frames with a few moving colored rectangles over a noisy gradient,
/// paired with poses sampled from the trajectory at each frame timestamp.
pub fn synthetic_stream(spec: &SyntheticSpec) -> Result<Vec<(ImageFrame, CameraPose)>> {
    if !(spec.fps.is_finite() && spec.fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {}", spec.fps)));
    }
    if spec.count == 0 {
        return Err(Error::Config("frame count must be at least 1".into()));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config(format!("frame size must be non-empty, got {}x{}", spec.width, spec.height)));
    }
    let (w, h) = (spec.width as i64, spec.height as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs: Vec<Blob> = (0..3)
        .map(|_| {
            let bw = rng.gen_range(1..=(w / 4).max(1));
            let bh = rng.gen_range(1..=(h / 4).max(1));
            Blob {
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                w: bw,
                h: bh,
                rgb: [rng.gen(), rng.gen(), rng.gen()],
                dx: rng.gen_range(-4..=4),
            }
        })
        .collect();

    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let timestamp_ns = (i as f64 * 1e9 / spec.fps).round() as u64;
        let mut pixels = Vec::with_capacity(spec.width * spec.height * 3);
        for y in 0..h {
            for x in 0..w {
                let noise: u8 = rng.gen_range(0..16);
                let g = ((x * 255) / w.max(1)) as u8 / 2;
                let b = ((y * 255) / h.max(1)) as u8 / 2;
                pixels.extend_from_slice(&[noise, g.wrapping_add(noise), b.wrapping_add(noise)]);
            }
        }
        for blob in &blobs {
            let x0 = (blob.x + blob.dx * i as i64).rem_euclid(w);
            for y in blob.y..(blob.y + blob.h).min(h) {
                for x in x0..(x0 + blob.w).min(w) {
                    let p = ((y * w + x) * 3) as usize;
                    pixels[p..p + 3].copy_from_slice(&blob.rgb);
                }
            }
        }
        let frame = ImageFrame::new(i as u64, spec.width, spec.height, pixels, timestamp_ns)?;
        out.push((frame, spec.trajectory.pose_at(timestamp_ns)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    const MS: u64 = 1_000_000;

    fn pose(t: u64) -> CameraPose {
        CameraPose::identity(t)
    }

    #[test]
    fn push_first_pose() {
        let mut buf = PoseBuffer::default();
        buf.push(pose(5)).unwrap();
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn full_buffer_evicts_oldest() {
        let mut buf = PoseBuffer::default();
        for t in 0..128 {
            buf.push(pose(t)).unwrap();
        }
        buf.push(pose(1000)).unwrap();
        assert_eq!(buf.len(), 128);
        assert_eq!(buf.iter().next().unwrap().timestamp_ns(), 1);
        assert_eq!(buf.iter().last().unwrap().timestamp_ns(), 1000);
    }

    #[test]
    fn out_of_order_pose_rejected() {
        let mut buf = PoseBuffer::default();
        buf.push(pose(5)).unwrap();
        assert!(matches!(buf.push(pose(3)), Err(Error::PoseOrdering { got: 3, newest: 5 })));
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn nearest_pose_lookup() {
        let mut buf = PoseBuffer::default();
        for t in [0, 33, 66] {
            buf.push(pose(t * MS)).unwrap();
        }
        assert_eq!(buf.pose_at(30 * MS, 100 * MS).unwrap().timestamp_ns(), 33 * MS);
        assert_eq!(buf.pose_at(66 * MS, 100 * MS).unwrap().timestamp_ns(), 66 * MS);
    }

    #[test]
    fn stale_and_empty_lookups() {
        let mut buf = PoseBuffer::default();
        assert!(matches!(buf.pose_at(0, 100 * MS), Err(Error::NoPose)));
        buf.push(pose(0)).unwrap();
        assert!(matches!(buf.pose_at(500 * MS, 100 * MS), Err(Error::StalePose { .. })));
    }

    #[test]
    fn pose_validation() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(CameraPose::new(m, 0).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1.0;
        assert!(CameraPose::new(m, 0).is_err());
        // reflection: orthonormal but det = -1
        let mut m = Matrix4::identity();
        m[(2, 2)] = -1.0;
        assert!(CameraPose::new(m, 0).is_err());
    }

    fn linear_scan(entries: &[CameraPose], q: u64, tol: u64) -> Option<u64> {
        let mut best: Option<(u64, &CameraPose)> = None;
        for p in entries {
            let gap = p.timestamp_ns().abs_diff(q);
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, p));
            }
        }
        best.filter(|(g, _)| *g <= tol).map(|(_, p)| p.timestamp_ns())
    }

    proptest! {
        #[test]
        fn pose_lookup_matches_linear_scan(
            steps in proptest::collection::vec(0u64..50, 1..300),
            capacity in 1usize..64,
            queries in proptest::collection::vec(0u64..20_000, 1..20),
            tol in 0u64..200,
        ) {
            let mut buf = PoseBuffer::with_capacity(capacity);
            let mut t = 0;
            for (i, s) in steps.iter().enumerate() {
                t += s;
                // tag each pose through its translation so duplicates are distinguishable
                buf.push(CameraPose::from_parts(Rotation3::identity(), Vector3::new(i as f64, 0.0, 0.0), t)).unwrap();
            }
            let retained: Vec<CameraPose> = buf.iter().copied().collect();
            for q in queries {
                let expected = linear_scan(&retained, q, tol);
                match buf.pose_at(q, tol) {
                    Ok(p) => {
                        prop_assert_eq!(Some(p.timestamp_ns()), expected);
                        let first = retained.iter().find(|r| r.timestamp_ns() == p.timestamp_ns()).unwrap();
                        prop_assert_eq!(first.translation(), p.translation());
                    }
                    Err(_) => prop_assert_eq!(expected, None),
                }
            }
        }
    }

    #[test]
    fn mailbox_latest_wins() {
        let mb = FrameMailbox::new();
        let f = |id| ImageFrame::new(id, 1, 1, vec![0, 0, 0], id).unwrap();
        mb.publish(f(1));
        mb.publish(f(2));
        assert_eq!(mb.take_latest().unwrap().frame_id(), 2);
        assert!(mb.take_latest().is_none());

        mb.publish(f(3));
        assert_eq!(mb.take_latest().unwrap().frame_id(), 3);
        assert!(mb.take_timeout(Duration::from_millis(5)).is_none());

        for id in 0..1000 {
            mb.publish(f(id));
        }
        assert_eq!(mb.take_latest().unwrap().frame_id(), 999);
        assert!(mb.dropped() >= 1000);
    }

    #[test]
    fn mailbox_across_threads_never_goes_backwards() {
        let mb = Arc::new(FrameMailbox::new());
        let producer = {
            let mb = Arc::clone(&mb);
            std::thread::spawn(move || {
                for id in 0..2000 {
                    mb.publish(ImageFrame::new(id, 1, 1, vec![0, 0, 0], id).unwrap());
                }
            })
        };
        let mut last = None;
        while !producer.is_finished() {
            if let Some(f) = mb.take_timeout(Duration::from_millis(1)) {
                assert!(last.is_none_or(|l| f.frame_id() > l));
                last = Some(f.frame_id());
            }
        }
        producer.join().unwrap();
        if let Some(f) = mb.take_latest() {
            assert_eq!(f.frame_id(), 1999);
        }
    }

    #[test]
    fn synthetic_timestamps_and_identity() {
        let spec = SyntheticSpec::new(1280, 720, 30.0, 3, 7);
        let frames = synthetic_stream(&spec).unwrap();
        let ts: Vec<u64> = frames.iter().map(|(f, _)| f.timestamp_ns()).collect();
        assert_eq!(ts, vec![0, 33_333_333, 66_666_667]);
        for (f, p) in &frames {
            assert_eq!(f.pixels().len(), 1280 * 720 * 3);
            assert_eq!(*p.camera_to_world(), Matrix4::identity());
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(64, 48, 30.0, 4, 11);
        let a = synthetic_stream(&spec).unwrap();
        let b = synthetic_stream(&spec).unwrap();
        assert_eq!(a.iter().map(|(f, _)| f).collect::<Vec<_>>(), b.iter().map(|(f, _)| f).collect::<Vec<_>>());
        let other = synthetic_stream(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a[0].0.pixels(), other[0].0.pixels());
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        assert!(synthetic_stream(&SyntheticSpec::new(8, 8, 0.0, 1, 0)).is_err());
        assert!(synthetic_stream(&SyntheticSpec::new(8, 8, 30.0, 0, 0)).is_err());
    }

    #[test]
    fn yaw_trajectory_is_valid_pose() {
        let traj = Trajectory::Yaw { rate: 1.3 };
        let p = traj.pose_at(1_500_000_000);
        CameraPose::new(*p.camera_to_world(), p.timestamp_ns()).unwrap();
    }
}
