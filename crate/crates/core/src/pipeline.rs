//! The composed detector: preprocess → infer → postprocess → (merge) → (anchor).

use serde::{Deserialize, Serialize};

use crate::decode::{decode_batch, finish, nms, CoordSpace, DecodeConfig, Detection};
use crate::engine::{BackendKind, InferenceSession};
use crate::error::{Error, Result};
use crate::frame::{CameraIntrinsics, ImageFrame, PoseBuffer, DEFAULT_POSE_TOLERANCE_NS};
use crate::geometry::{anchor_detection, Anchor3D, PlacementPolicy};
use crate::preprocess::{crop, normalize, preprocess, CropRect};
use crate::profiler::{Stage, StageTimer};
use crate::tiler::{assemble_batch, merge_detections, plan_tiles, TilePlan};

/// How the network input is cut from the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputMode {
    /// One centered n×n crop.
    CenterCrop,
    /// A centered `width`×`height` region split into n×n tiles run as one batch.
    Tiled { width: usize, height: usize, overlap: usize },
}

#[derive(Debug, Clone)]
pub struct AnchorSetup {
    pub intrinsics: CameraIntrinsics,
    pub poses: PoseBuffer,
    pub tolerance_ns: u64,
    pub policy: PlacementPolicy,
}

impl AnchorSetup {
    pub fn new(intrinsics: CameraIntrinsics, poses: PoseBuffer, policy: PlacementPolicy) -> Self {
        Self { intrinsics, poses, tolerance_ns: DEFAULT_POSE_TOLERANCE_NS, policy }
    }
}

/// Static description of what a pipeline runs, echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub variant_name: String,
    pub input_size: usize,
    pub backend: BackendKind,
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiling: Option<TilePlan>,
}

impl RunDescriptor {
    /// Pixels pushed through the network per run.
    pub fn pixels(&self) -> usize {
        self.batch * self.input_size * self.input_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Full-frame detections, best first.
    pub detections: Vec<Detection>,
    pub anchors: Vec<Anchor3D>,
}

pub struct Pipeline {
    session: InferenceSession,
    decode: DecodeConfig,
    mode: InputMode,
    anchoring: Option<AnchorSetup>,
}

impl Pipeline {
    pub fn new(session: InferenceSession, decode: DecodeConfig) -> Result<Self> {
        decode.validate()?;
        Ok(Self { session, decode, mode: InputMode::CenterCrop, anchoring: None })
    }

    pub fn tiled(mut self, width: usize, height: usize, overlap: usize) -> Result<Self> {
        plan_tiles(width, height, self.input_size(), overlap)?;
        self.mode = InputMode::Tiled { width, height, overlap };
        Ok(self)
    }

    pub fn with_anchoring(mut self, setup: AnchorSetup) -> Result<Self> {
        setup.policy.validate()?;
        self.anchoring = Some(setup);
        Ok(self)
    }

    pub fn session(&self) -> &InferenceSession {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut InferenceSession {
        &mut self.session
    }

    pub fn anchoring_mut(&mut self) -> Option<&mut AnchorSetup> {
        self.anchoring.as_mut()
    }

    pub fn input_size(&self) -> usize {
        self.session.descriptor().input_size()
    }

    pub fn mode(&self) -> InputMode {
        self.mode
    }

    pub fn describe(&self) -> RunDescriptor {
        let d = self.session.descriptor();
        let tiling = match self.mode {
            InputMode::CenterCrop => None,
            InputMode::Tiled { width, height, overlap } => plan_tiles(width, height, d.input_size(), overlap).ok(),
        };
        RunDescriptor {
            variant_name: d.variant_name.clone(),
            input_size: d.input_size(),
            backend: self.session.backend_kind(),
            batch: tiling.as_ref().map_or(1, TilePlan::len),
            tiling,
        }
    }

    pub fn run(&mut self, frame: &ImageFrame) -> Result<PipelineOutput> {
        let clock = self.session.clock().clone();
        let mut timer = StageTimer::new(clock.as_ref());
        self.run_timed(frame, &mut timer)
    }

    pub fn run_timed(&mut self, frame: &ImageFrame, timer: &mut StageTimer<'_>) -> Result<PipelineOutput> {
        let detections = match self.mode {
            InputMode::CenterCrop => self.run_center(frame, timer)?,
            InputMode::Tiled { width, height, overlap } => self.run_tiled(frame, width, height, overlap, timer)?,
        };
        let anchors = match &self.anchoring {
            None => Vec::new(),
            Some(setup) => timer.time(Stage::Anchor, || {
                detections
                    .iter()
                    .map(|d| {
                        anchor_detection(
                            d,
                            frame.timestamp_ns(),
                            &setup.intrinsics,
                            &setup.poses,
                            setup.tolerance_ns,
                            &setup.policy,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })?,
        };
        Ok(PipelineOutput { detections, anchors })
    }

    fn run_center(&mut self, frame: &ImageFrame, timer: &mut StageTimer<'_>) -> Result<Vec<Detection>> {
        let n = self.input_size();
        let layout = self.session.descriptor().layout;
        let pre_delay = self.session.injected_delay(Stage::Preprocess);
        let post_delay = self.session.injected_delay(Stage::Postprocess);
        let clock = self.session.clock().clone();

        let (tensor, rect) = timer.time(Stage::Preprocess, || {
            clock.delay(pre_delay);
            preprocess(frame, n, layout)
        })?;
        let raw = timer.time(Stage::Inference, || self.session.infer(&tensor))?;
        timer.time(Stage::Postprocess, || {
            clock.delay(post_delay);
            let decoded = decode_batch(&raw, &self.decode)?;
            let first = decoded.into_iter().next().unwrap_or_default();
            Ok(finish(&first, &self.decode, rect.x as f64, rect.y as f64))
        })
    }

    fn run_tiled(
        &mut self,
        frame: &ImageFrame,
        width: usize,
        height: usize,
        overlap: usize,
        timer: &mut StageTimer<'_>,
    ) -> Result<Vec<Detection>> {
        let n = self.input_size();
        let layout = self.session.descriptor().layout;
        let pre_delay = self.session.injected_delay(Stage::Preprocess);
        let post_delay = self.session.injected_delay(Stage::Postprocess);
        let clock = self.session.clock().clone();
        let region = region_rect(frame, width, height)?;

        let (batch, plan) = timer.time(Stage::Preprocess, || {
            clock.delay(pre_delay);
            let plan = plan_tiles(width, height, n, overlap)?;
            let image = normalize(&crop(frame, region.0, region.1, width, height));
            Ok::<_, Error>((assemble_batch(&image, &plan, layout)?, plan))
        })?;
        let raw = timer.time(Stage::Inference, || self.session.infer(&batch))?;
        let per_tile = timer.time(Stage::Postprocess, || {
            clock.delay(post_delay);
            let decoded = decode_batch(&raw, &self.decode)?;
            Ok::<_, Error>(
                decoded
                    .iter()
                    .map(|dets| {
                        let mut kept = nms(dets, self.decode.nms_iou_threshold, self.decode.class_aware_nms);
                        kept.truncate(self.decode.max_detections);
                        kept
                    })
                    .collect::<Vec<_>>(),
            )
        })?;
        timer.time(Stage::Merge, || {
            let merged = merge_detections(&per_tile, &plan, &self.decode)?;
            Ok(merged.iter().map(|d| d.offset(region.0 as f64, region.1 as f64, CoordSpace::FullFrame)).collect())
        })
    }
}

/// Top-left corner of the centered `width`×`height` region.
pub fn region_rect(frame: &ImageFrame, width: usize, height: usize) -> Result<(usize, usize)> {
    if width > frame.width() || height > frame.height() || width == 0 || height == 0 {
        return Err(Error::FrameTooSmall { width: frame.width(), height: frame.height(), size: width.max(height) });
    }
    Ok(((frame.width() - width) / 2, (frame.height() - height) / 2))
}

/// The crop a center-crop pipeline of size `n` applies to `frame`.
pub fn center_rect(frame: &ImageFrame, n: usize) -> Result<CropRect> {
    let (x, y) = region_rect(frame, n, n)?;
    Ok(CropRect { x, y, size: n })
}
