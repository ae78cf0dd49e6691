//! Latency-aware object detection for camera-equipped headsets.
//!
//! A frame is center-cropped (or tiled) to the network input, run through an
//! ONNX detector, decoded with non-maximum suppression and mapped back to
//! full-frame pixels. Detections can be lifted to world-space rays using the
//! camera pose at acquisition time. The [`profiler`], [`evalmap`] and
//! [`selector`] modules measure latency and accuracy across model variants and
//! input sizes and pick the best configuration for a latency budget.

pub mod clock;
pub mod decode;
pub mod engine;
pub mod error;
pub mod evalmap;
pub mod frame;
pub mod geometry;
pub mod pipeline;
pub mod preprocess;
pub mod profiler;
pub mod selector;
pub mod tiler;

pub use decode::{BBox, CoordSpace, DecodeConfig, Detection, DetectionRecord, RawOutput};
pub use engine::{load_model, mock_session, BackendKind, InferenceSession, LoadOptions, ModelDescriptor, ModelSource};
pub use error::{Error, Result};
pub use frame::{CameraIntrinsics, CameraPose, ImageFrame, PoseBuffer};
pub use geometry::{Anchor3D, PlacementPolicy, Ray3D};
pub use pipeline::{AnchorSetup, Pipeline, PipelineOutput, RunDescriptor};
pub use preprocess::{InputTensor, Layout};
pub use profiler::{LatencyReport, Stage, SweepTable, TimingProtocol};
pub use selector::{Budget, Metric};
