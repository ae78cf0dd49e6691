//! YOLOv8 output decoding: per-candidate class selection, confidence
//! filtering, greedy non-maximum suppression, and crop-to-frame mapping.
//!
//! The v8 head has no objectness term. Each candidate carries
//! `(cx, cy, w, h)` in network-input pixels followed by `C` class scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AnchorRecord;
use crate::preprocess::CropRect;

/// Axis-aligned box in corner form: left, top, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSpace {
    NetworkInput,
    FullFrame,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub space: CoordSpace,
    pub category: u32,
    pub score: f64,
}

impl Detection {
    /// Moves the box by `(dx, dy)` and retags it.
    pub fn offset(&self, dx: f64, dy: f64, space: CoordSpace) -> Self {
        Self { bbox: self.bbox.translated(dx, dy), space, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
    pub class_aware_nms: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { confidence_threshold: 0.25, nms_iou_threshold: 0.45, max_detections: 100, class_aware_nms: true }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("confidence threshold", self.confidence_threshold), ("NMS IoU threshold", self.nms_iou_threshold)]
        {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which raw axis indexes candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// (batch, 4 + C, N), the standard export.
    ChannelsMajor,
    /// (batch, N, 4 + C)
    CandidatesMajor,
}

/// Undecoded prediction tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    dims: [usize; 3],
    values: Vec<f32>,
    category_count: usize,
}

impl RawOutput {
    pub fn new(dims: [usize; 3], values: Vec<f32>, category_count: usize) -> Result<Self> {
        if category_count == 0 {
            return Err(Error::Shape("category count must be at least 1".into()));
        }
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!("raw output dims {dims:?} do not match {} values", values.len())));
        }
        Ok(Self { dims, values, category_count })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn orientation(&self) -> Result<Orientation> {
        let ch = 4 + self.category_count;
        match (self.dims[1] == ch, self.dims[2] == ch) {
            (true, true) => Err(Error::Shape(format!(
                "raw output {:?} is ambiguous: both axes equal 4 + {}",
                self.dims, self.category_count
            ))),
            (true, false) => Ok(Orientation::ChannelsMajor),
            (false, true) => Ok(Orientation::CandidatesMajor),
            (false, false) => Err(Error::Shape(format!(
                "raw output {:?} has no axis of length 4 + {} = {ch}",
                self.dims, self.category_count
            ))),
        }
    }

    pub fn candidate_count(&self) -> Result<usize> {
        Ok(match self.orientation()? {
            Orientation::ChannelsMajor => self.dims[2],
            Orientation::CandidatesMajor => self.dims[1],
        })
    }

    /// Builds a raw tensor from per-candidate rows `[cx, cy, w, h, scores..]`.
    pub fn from_candidates(rows: &[Vec<f32>], category_count: usize, orientation: Orientation) -> Result<Self> {
        let ch = 4 + category_count;
        if rows.iter().any(|r| r.len() != ch) {
            return Err(Error::Shape(format!("every candidate row must have {ch} values")));
        }
        let n = rows.len();
        let mut values = vec![0.0; n * ch];
        for (i, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                match orientation {
                    Orientation::ChannelsMajor => values[c * n + i] = v,
                    Orientation::CandidatesMajor => values[i * ch + c] = v,
                }
            }
        }
        let dims = match orientation {
            Orientation::ChannelsMajor => [1, ch, n],
            Orientation::CandidatesMajor => [1, n, ch],
        };
        Self::new(dims, values, category_count)
    }

    /// Concatenates batch-1 outputs along the batch axis.
    pub fn stack(parts: &[RawOutput]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("cannot stack zero outputs".into()))?;
        let mut values = Vec::new();
        for p in parts {
            if p.dims[1..] != first.dims[1..] || p.category_count != first.category_count {
                return Err(Error::Shape("stacked outputs must share shape".into()));
            }
            values.extend_from_slice(&p.values);
        }
        let batch = parts.iter().map(|p| p.dims[0]).sum();
        Self::new([batch, first.dims[1], first.dims[2]], values, first.category_count)
    }

    fn slice(&self, index: usize) -> &[f32] {
        let len = self.dims[1] * self.dims[2];
        &self.values[index * len..(index + 1) * len]
    }
}

/// Decodes a batch-1 raw output into network-input detections, before NMS.
pub fn decode_raw(raw: &RawOutput, config: &DecodeConfig) -> Result<Vec<Detection>> {
    if raw.batch() != 1 {
        return Err(Error::Shape(format!("expected batch 1, got {}", raw.batch())));
    }
    decode_slice(raw, 0, config)
}

/// Decodes every batch entry independently.
pub fn decode_batch(raw: &RawOutput, config: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    (0..raw.batch()).map(|b| decode_slice(raw, b, config)).collect()
}

fn decode_slice(raw: &RawOutput, index: usize, config: &DecodeConfig) -> Result<Vec<Detection>> {
    let orientation = raw.orientation()?;
    let n = raw.candidate_count()?;
    let ch = 4 + raw.category_count;
    let data = raw.slice(index);
    let at = |cand: usize, channel: usize| match orientation {
        Orientation::ChannelsMajor => data[channel * n + cand],
        Orientation::CandidatesMajor => data[cand * ch + channel],
    };

    let mut out = Vec::new();
    for cand in 0..n {
        let mut best = (0usize, f32::NEG_INFINITY);
        for c in 0..raw.category_count {
            let s = at(cand, 4 + c);
            if s.is_nan() {
                return Err(Error::Data(format!("NaN score at candidate {cand}, class {c}")));
            }
            if s > best.1 {
                best = (c, s);
            }
        }
        let score = f64::from(best.1);
        if score < config.confidence_threshold {
            continue;
        }
        let [cx, cy, w, h] = [0, 1, 2, 3].map(|c| f64::from(at(cand, c)));
        if [cx, cy, w, h].iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite box at candidate {cand}")));
        }
        if w <= 0.0 || h <= 0.0 {
            log::debug!("dropping degenerate candidate {cand} ({w}x{h})");
            continue;
        }
        out.push(Detection {
            bbox: BBox::from_center(cx, cy, w, h),
            space: CoordSpace::NetworkInput,
            category: best.0 as u32,
            score: score.clamp(0.0, 1.0),
        });
    }
    Ok(out)
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices ordered by descending score, ties by ascending index.
pub(crate) fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Greedy NMS: keep the best remaining box and drop every remaining box whose
/// IoU with it exceeds `iou_threshold` (same category only when `class_aware`).
pub fn nms(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[rank + 1..] {
            if suppressed[j] || (class_aware && dets[j].category != dets[i].category) {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// decode → NMS → truncate → shift into full-frame pixels.
pub fn postprocess(raw: &RawOutput, config: &DecodeConfig, crop: &CropRect) -> Result<Vec<Detection>> {
    let decoded = decode_raw(raw, config)?;
    Ok(finish(&decoded, config, crop.x as f64, crop.y as f64))
}

pub(crate) fn finish(decoded: &[Detection], config: &DecodeConfig, dx: f64, dy: f64) -> Vec<Detection> {
    let mut kept = nms(decoded, config.nms_iou_threshold, config.class_aware_nms);
    kept.truncate(config.max_detections);
    kept.iter().map(|d| d.offset(dx, dy, CoordSpace::FullFrame)).collect()
}

/// One detection in the COCO results interchange layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorRecord>,
}

impl DetectionRecord {
    pub fn new(image_id: u64, category_id: u64, det: &Detection) -> Self {
        Self { image_id, category_id, bbox: det.bbox.to_array(), score: det.score, anchor: None }
    }
}
