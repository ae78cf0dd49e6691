//! Square tiling of a non-square region, batched inference input, and
//! cross-tile merging of detections.

use serde::{Deserialize, Serialize};

use crate::decode::{nms, CoordSpace, DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::preprocess::{to_tensor, BatchTensor, InputTensor, Layout, NormalizedImage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tile_size: usize,
    /// Top-left corners, row-major.
    pub origins: Vec<(usize, usize)>,
    /// (width, height) covered.
    pub region: (usize, usize),
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Tile starts along one axis; the last tile is snapped to end at `len`.
fn axis_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut p = 0;
    loop {
        if p + tile >= len {
            starts.push(len - tile);
            break;
        }
        starts.push(p);
        p += stride;
    }
    starts.dedup();
    starts
}

pub fn plan_tiles(width: usize, height: usize, tile_size: usize, overlap: usize) -> Result<TilePlan> {
    if tile_size == 0 || tile_size > width.min(height) {
        return Err(Error::Plan(format!("tile {tile_size} does not fit a {width}x{height} region")));
    }
    if overlap >= tile_size {
        return Err(Error::Plan(format!("overlap {overlap} must be smaller than tile {tile_size}")));
    }
    let stride = tile_size - overlap;
    let xs = axis_starts(width, tile_size, stride);
    let ys = axis_starts(height, tile_size, stride);
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(TilePlan { tile_size, origins, region: (width, height) })
}

/// Cuts the normalized region into the plan's tiles and stacks them.
pub fn assemble_batch(image: &NormalizedImage, plan: &TilePlan, layout: Layout) -> Result<BatchTensor> {
    if (image.width, image.height) != plan.region {
        return Err(Error::Shape(format!(
            "image is {}x{} but the plan covers {}x{}",
            image.width, image.height, plan.region.0, plan.region.1
        )));
    }
    let n = plan.tile_size;
    let tiles = plan
        .origins
        .iter()
        .map(|&(x0, y0)| {
            let mut data = Vec::with_capacity(n * n * 3);
            for y in y0..y0 + n {
                let start = (y * image.width + x0) * 3;
                data.extend_from_slice(&image.data[start..start + n * 3]);
            }
            to_tensor(&NormalizedImage { width: n, height: n, data }, layout)
        })
        .collect::<Result<Vec<InputTensor>>>()?;
    InputTensor::stack(&tiles)
}

/// Shifts each tile's detections by its origin, then suppresses duplicates
/// across tiles with the same NMS used everywhere else.
///
/// The result is in region coordinates, tagged full-frame.
pub fn merge_detections(per_tile: &[Vec<Detection>], plan: &TilePlan, config: &DecodeConfig) -> Result<Vec<Detection>> {
    if per_tile.len() != plan.len() {
        return Err(Error::Shape(format!("{} detection lists for {} tiles", per_tile.len(), plan.len())));
    }
    let shifted: Vec<Detection> = per_tile
        .iter()
        .zip(&plan.origins)
        .flat_map(|(dets, &(x, y))| dets.iter().map(move |d| d.offset(x as f64, y as f64, CoordSpace::FullFrame)))
        .collect();
    let mut merged = nms(&shifted, config.nms_iou_threshold, config.class_aware_nms);
    merged.truncate(config.max_detections);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{iou, BBox};
    use crate::frame::ImageFrame;
    use crate::preprocess::{crop, normalize, preprocess};

    fn raster_covered(plan: &TilePlan) -> bool {
        let (w, h) = plan.region;
        let mut hit = vec![false; w * h];
        for &(x0, y0) in &plan.origins {
            assert!(x0 + plan.tile_size <= w && y0 + plan.tile_size <= h, "tile leaves region");
            for y in y0..y0 + plan.tile_size {
                for x in x0..x0 + plan.tile_size {
                    hit[y * w + x] = true;
                }
            }
        }
        hit.into_iter().all(|b| b)
    }

    #[test]
    fn side_by_side_split() {
        let plan = plan_tiles(320, 160, 160, 0).unwrap();
        assert_eq!(plan.origins, vec![(0, 0), (160, 0)]);
        assert_eq!(plan_tiles(160, 160, 160, 0).unwrap().origins, vec![(0, 0)]);
    }

    #[test]
    fn edge_snapped_split_covers() {
        let plan = plan_tiles(300, 160, 160, 0).unwrap();
        assert_eq!(plan.origins, vec![(0, 0), (140, 0)]);
        assert!(raster_covered(&plan));
    }

    #[test]
    fn plan_errors() {
        assert!(matches!(plan_tiles(100, 100, 160, 0), Err(Error::Plan(_))));
        assert!(matches!(plan_tiles(320, 160, 160, 160), Err(Error::Plan(_))));
    }

    #[test]
    fn coverage_exhaustive_small_grids() {
        for w in 1..=24 {
            for h in 1..=24 {
                for tile in 1..=w.min(h) {
                    for overlap in 0..tile {
                        let plan = plan_tiles(w, h, tile, overlap).unwrap();
                        assert!(raster_covered(&plan), "{w}x{h} tile {tile} overlap {overlap}");
                        let mut sorted = plan.origins.clone();
                        sorted.sort_by_key(|&(x, y)| (y, x));
                        assert_eq!(sorted, plan.origins, "origins must be row-major");
                    }
                }
            }
        }
    }

    fn frame(w: usize, h: usize) -> ImageFrame {
        let px = (0..w * h * 3).map(|i| ((i * 7) % 256) as u8).collect();
        ImageFrame::new(0, w, h, px, 0).unwrap()
    }

    #[test]
    fn batch_slices_match_direct_preprocess() {
        let f = frame(320, 160);
        let plan = plan_tiles(320, 160, 160, 0).unwrap();
        let region = normalize(&crop(&f, 0, 0, 320, 160));
        let batch = assemble_batch(&region, &plan, Layout::ChannelsFirst).unwrap();
        assert_eq!(batch.dims(), [2, 3, 160, 160]);
        for (i, &(x, y)) in plan.origins.iter().enumerate() {
            let tile = ImageFrame::new(0, 160, 160, crop(&f, x, y, 160, 160).data, 0).unwrap();
            let (direct, _) = preprocess(&tile, 160, Layout::ChannelsFirst).unwrap();
            assert_eq!(batch.slice(i), direct.values());
        }
    }

    #[test]
    fn single_tile_and_constant_batches() {
        let f = frame(64, 64);
        let img = normalize(&crop(&f, 0, 0, 64, 64));
        let plan = plan_tiles(64, 64, 64, 0).unwrap();
        let batch = assemble_batch(&img, &plan, Layout::ChannelsLast).unwrap();
        assert_eq!(batch, to_tensor(&img, Layout::ChannelsLast).unwrap());

        let flat = ImageFrame::filled(320, 160, [9, 99, 199]).unwrap();
        let img = normalize(&crop(&flat, 0, 0, 320, 160));
        let batch = assemble_batch(&img, &plan_tiles(320, 160, 160, 0).unwrap(), Layout::ChannelsFirst).unwrap();
        assert_eq!(batch.slice(0), batch.slice(1));
        let wrong = plan_tiles(300, 160, 160, 0).unwrap();
        assert!(matches!(assemble_batch(&img, &wrong, Layout::ChannelsFirst), Err(Error::Shape(_))));
    }

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection { bbox: BBox::new(x, y, w, h), space: CoordSpace::NetworkInput, category: 0, score }
    }

    #[test]
    fn merge_offsets_and_suppresses_border_duplicates() {
        let plan = plan_tiles(320, 160, 160, 0).unwrap();
        let cfg = DecodeConfig::default();
        let merged = merge_detections(&[vec![], vec![det(10.0, 20.0, 30.0, 30.0, 0.9)]], &plan, &cfg).unwrap();
        assert_eq!(merged[0].bbox.x, 170.0);
        assert_eq!(merged[0].space, CoordSpace::FullFrame);

        // one object inside the 20 px shared strip of an edge-snapped plan
        let snapped = plan_tiles(300, 160, 160, 0).unwrap();
        let left = det(142.0, 50.0, 18.0, 20.0, 0.7);
        let right = det(4.0, 50.0, 18.0, 20.0, 0.8);
        assert_eq!(iou(&left.bbox, &right.bbox.translated(140.0, 0.0)), 0.8);
        let merged = merge_detections(&[vec![left], vec![right]], &snapped, &cfg).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].score, 0.8);
        assert_eq!(merged[0].bbox.x, 144.0);

        assert!(merge_detections(&[vec![], vec![]], &plan, &cfg).unwrap().is_empty());
        assert!(merge_detections(&[vec![]], &plan, &cfg).is_err());
    }
}
