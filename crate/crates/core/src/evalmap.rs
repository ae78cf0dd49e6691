//! COCO-style box evaluation (mAP@50, mAP@50-95) and per-group recall.
//!
//! Matching is greedy in descending score order: a detection takes the
//! unmatched same-category ground truth with the highest IoU at or above the
//! threshold, earlier ground truths winning exact ties. AP is the mean of the
//! precision envelope sampled at 101 recall points. `iscrowd` regions and area
//! ranges are not special-cased.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decode::{iou, score_order, BBox, DetectionRecord};
use crate::error::{Error, Result};
use crate::frame::ImageFrame;

/// Maps the 80 contiguous YOLO class indices to the sparse COCO category ids.
pub const COCO80_TO_COCO91: [u64; 80] = [
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 27, 28, 31, 32, 33, 34, 35,
    36, 37, 38, 39, 40, 41, 42, 43, 44, 46, 47, 48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65,
    67, 70, 72, 73, 74, 75, 76, 77, 78, 79, 80, 81, 82, 84, 85, 86, 87, 88, 89, 90,
];

pub const DEFAULT_GROUP_ATTRIBUTE: &str = "group";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthItem {
    pub image_id: u64,
    pub bbox: BBox,
    pub category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_detections_per_image: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| i as f64 * 0.05 + 0.5).collect(),
            recall_points: 101,
            max_detections_per_image: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty()
            || self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.iou_thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("IoU thresholds must be ascending within (0, 1)".into()));
        }
        if self.recall_points < 2 || self.max_detections_per_image == 0 {
            return Err(Error::Config("need at least 2 recall points and 1 detection per image".into()));
        }
        Ok(())
    }

    fn recall_grid(&self) -> Vec<f64> {
        let step = 1.0 / (self.recall_points - 1) as f64;
        let mut grid: Vec<f64> = (0..self.recall_points).map(|i| i as f64 * step).collect();
        *grid.last_mut().expect("at least two points") = 1.0;
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category_id: u64,
    pub ap50: f64,
    pub ap50_95: f64,
    pub ground_truths: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map50: f64,
    pub map50_95: f64,
    pub per_category: Vec<CategoryAp>,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

/// Image entry of a COCO annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(flatten)]
    extra: serde_json::Map<String, Value>,
}

/// Images and validated ground truth of a COCO annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<GroundTruthItem>,
}

fn parse_err(context: &str, e: serde_json::Error) -> Error {
    Error::Parse { context: context.into(), reason: format!("{e} (line {}, column {})", e.line(), e.column()) }
}

pub fn read_dataset(reader: impl Read, group_attribute: &str) -> Result<CocoDataset> {
    let file: CocoFile = serde_json::from_reader(reader).map_err(|e| parse_err("annotation file", e))?;
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for (i, a) in file.annotations.into_iter().enumerate() {
        let [x, y, w, h] = a.bbox;
        if !(w > 0.0 && h > 0.0) || !(x.is_finite() && y.is_finite()) {
            log::warn!("skipping annotation #{i} on image {}: degenerate box {:?}", a.image_id, a.bbox);
            continue;
        }
        let group_tag = a.extra.get(group_attribute).and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Null => None,
            other => Some(other.to_string()),
        });
        annotations.push(GroundTruthItem {
            image_id: a.image_id,
            bbox: BBox::new(x, y, w, h),
            category_id: a.category_id,
            group_tag,
        });
    }
    Ok(CocoDataset { images: file.images, annotations })
}

pub fn load_dataset(path: &Path, group_attribute: &str) -> Result<CocoDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file), group_attribute).map_err(|e| match e {
        Error::Parse { reason, .. } => Error::Parse { context: path.display().to_string(), reason },
        other => other,
    })
}

/// Ground truth from a COCO annotation file; category ids pass through as-is.
pub fn load_annotations(path: &Path, group_attribute: &str) -> Result<Vec<GroundTruthItem>> {
    Ok(load_dataset(path, group_attribute)?.annotations)
}

/// Detections from a COCO results file.
pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = std::fs::File::open(path)?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        reason: format!("{e} (line {}, column {})", e.line(), e.column()),
    })
}

/// Outcome of greedy matching, aligned with the inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `true` for a true positive, indexed like the input detections.
    pub detection_tp: Vec<bool>,
    /// Whether each ground truth was claimed, indexed like the input list.
    pub gt_matched: Vec<bool>,
}

pub fn match_detections(dets: &[DetectionRecord], gts: &[GroundTruthItem], iou_threshold: f64) -> MatchResult {
    let mut gt_index: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        gt_index.entry((g.image_id, g.category_id)).or_default().push(i);
    }
    let mut gt_matched = vec![false; gts.len()];
    let mut detection_tp = vec![false; dets.len()];
    for d in score_order(dets.iter().map(|d| d.score)) {
        let det = &dets[d];
        let Some(candidates) = gt_index.get(&(det.image_id, det.category_id)) else {
            continue;
        };
        let bbox = BBox::new(det.bbox[0], det.bbox[1], det.bbox[2], det.bbox[3]);
        let mut best: Option<(usize, f64)> = None;
        for &g in candidates {
            if gt_matched[g] {
                continue;
            }
            let overlap = iou(&bbox, &gts[g].bbox);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            detection_tp[d] = true;
        }
    }
    MatchResult { detection_tp, gt_matched }
}

/// AP from TP/FP labels in descending score order. `None` when the category has
/// neither ground truth nor detections.
pub fn average_precision(labels: &[bool], gt_count: usize) -> Option<f64> {
    average_precision_on(labels, gt_count, &EvalConfig::default().recall_grid())
}

fn average_precision_on(labels: &[bool], gt_count: usize, recall_grid: &[f64]) -> Option<f64> {
    if gt_count == 0 {
        return if labels.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in labels {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = recall_grid
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&rc| rc < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / recall_grid.len() as f64)
}

/// Keeps the `max` best-scoring detections of every image.
fn truncate_per_image(dets: &[DetectionRecord], max: usize) -> Vec<DetectionRecord> {
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut keep = vec![false; dets.len()];
    for i in score_order(dets.iter().map(|d| d.score)) {
        let count = seen.entry(dets[i].image_id).or_default();
        if *count < max {
            *count += 1;
            keep[i] = true;
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect()
}

pub fn evaluate(dets: &[DetectionRecord], gts: &[GroundTruthItem], config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    let dets = truncate_per_image(dets, config.max_detections_per_image);
    let grid = config.recall_grid();
    let categories: BTreeSet<u64> =
        gts.iter().map(|g| g.category_id).chain(dets.iter().map(|d| d.category_id)).collect();
    let images: BTreeSet<u64> = gts.iter().map(|g| g.image_id).chain(dets.iter().map(|d| d.image_id)).collect();

    let mut thresholds = config.iou_thresholds.clone();
    let fifty = thresholds.iter().position(|t| (t - 0.5).abs() < 1e-12);
    let fifty = fifty.unwrap_or_else(|| {
        thresholds.push(0.5);
        thresholds.len() - 1
    });

    let mut per_category = Vec::new();
    for &cat in &categories {
        let cat_dets: Vec<DetectionRecord> = dets.iter().filter(|d| d.category_id == cat).cloned().collect();
        let cat_gts: Vec<GroundTruthItem> = gts.iter().filter(|g| g.category_id == cat).cloned().collect();
        let order = score_order(cat_dets.iter().map(|d| d.score));
        let aps: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| {
                let m = match_detections(&cat_dets, &cat_gts, t);
                let labels: Vec<bool> = order.iter().map(|&i| m.detection_tp[i]).collect();
                average_precision_on(&labels, cat_gts.len(), &grid)
            })
            .collect();
        let Some(ap50) = aps[fifty] else { continue };
        let strict: Vec<f64> = aps[..config.iou_thresholds.len()].iter().flatten().copied().collect();
        per_category.push(CategoryAp {
            category_id: cat,
            ap50,
            ap50_95: strict.iter().sum::<f64>() / strict.len() as f64,
            ground_truths: cat_gts.len(),
            detections: cat_dets.len(),
        });
    }
    let mean = |f: fn(&CategoryAp) -> f64| {
        if per_category.is_empty() {
            0.0
        } else {
            per_category.iter().map(f).sum::<f64>() / per_category.len() as f64
        }
    };
    Ok(EvalResult {
        map50: mean(|c| c.ap50),
        map50_95: mean(|c| c.ap50_95),
        images: images.len(),
        ground_truths: gts.len(),
        detections: dets.len(),
        per_category,
    })
}

/// Decoded images with their ground truth, for running a detector end to end.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub images: Vec<(u64, ImageFrame)>,
    pub ground_truth: Vec<GroundTruthItem>,
    /// Category id for each network class index; identity when `None`.
    pub category_map: Option<Vec<u64>>,
}

impl EvalDataset {
    pub fn category_id(&self, class: u32) -> Result<u64> {
        match &self.category_map {
            None => Ok(u64::from(class)),
            Some(map) => map
                .get(class as usize)
                .copied()
                .ok_or_else(|| Error::Config(format!("class {class} has no category mapping"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecall {
    pub ground_truths: usize,
    pub matched: usize,
    pub recall: f64,
}

/// Recall per ground-truth group tag, counting only detections scoring at
/// least `score_threshold`. Untagged ground truth is ignored.
pub fn recall_by_group(
    dets: &[DetectionRecord],
    gts: &[GroundTruthItem],
    iou_threshold: f64,
    score_threshold: f64,
) -> BTreeMap<String, GroupRecall> {
    let kept: Vec<DetectionRecord> = dets.iter().filter(|d| d.score >= score_threshold).cloned().collect();
    let m = match_detections(&kept, gts, iou_threshold);
    let mut groups: BTreeMap<String, GroupRecall> = BTreeMap::new();
    for (g, matched) in gts.iter().zip(m.gt_matched) {
        let Some(tag) = &g.group_tag else { continue };
        let entry = groups.entry(tag.clone()).or_insert(GroupRecall { ground_truths: 0, matched: 0, recall: 0.0 });
        entry.ground_truths += 1;
        entry.matched += usize::from(matched);
    }
    for g in groups.values_mut() {
        g.recall = g.matched as f64 / g.ground_truths as f64;
    }
    groups
}
