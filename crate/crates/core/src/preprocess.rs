//! Center crop, [0, 1] normalization and tensor assembly.
//!
//! Frames are never resized: a crop larger than the frame is an error, so box
//! coordinates map back to the frame by a pure translation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::ImageFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// (batch, n, n, 3)
    ChannelsLast,
    /// (batch, 3, n, n)
    #[default]
    ChannelsFirst,
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Interleaved RGB with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Image tensor with extents (batch, 3, n, n) or (batch, n, n, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    dims: [usize; 4],
    layout: Layout,
    values: Vec<f32>,
}

/// A tensor whose batch extent counts tiles.
pub type BatchTensor = InputTensor;

impl InputTensor {
    pub fn zeros(batch: usize, size: usize, layout: Layout) -> Self {
        let dims = dims_for(batch, size, layout);
        Self { dims, layout, values: vec![0.0; batch * 3 * size * size] }
    }

    pub fn from_values(batch: usize, size: usize, layout: Layout, values: Vec<f32>) -> Result<Self> {
        if values.len() != batch * 3 * size * size {
            return Err(Error::Shape(format!(
                "{} values do not fill a ({batch}, 3, {size}, {size}) tensor",
                values.len()
            )));
        }
        Ok(Self { dims: dims_for(batch, size, layout), layout, values })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Spatial side length n.
    pub fn size(&self) -> usize {
        match self.layout {
            Layout::ChannelsFirst => self.dims[2],
            Layout::ChannelsLast => self.dims[1],
        }
    }

    pub fn slice(&self, index: usize) -> &[f32] {
        let len = 3 * self.size() * self.size();
        &self.values[index * len..(index + 1) * len]
    }

    /// Stacks equally shaped batch-1 tensors along the batch axis.
    pub fn stack(parts: &[InputTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let (size, layout) = (first.size(), first.layout);
        let mut values = Vec::with_capacity(parts.len() * first.values.len());
        for p in parts {
            if p.size() != size || p.layout != layout {
                return Err(Error::Shape("stacked tensors must share size and layout".into()));
            }
            values.extend_from_slice(&p.values);
        }
        let batch = values.len() / (3 * size * size);
        Ok(Self { dims: dims_for(batch, size, layout), layout, values })
    }

    pub fn to_layout(&self, layout: Layout) -> Self {
        if layout == self.layout {
            return self.clone();
        }
        let n = self.size();
        let plane = n * n;
        let mut values = vec![0.0; self.values.len()];
        for b in 0..self.batch() {
            let src = self.slice(b);
            let dst = &mut values[b * 3 * plane..(b + 1) * 3 * plane];
            for y in 0..n {
                for x in 0..n {
                    for c in 0..3 {
                        let last = (y * n + x) * 3 + c;
                        let first = (c * n + y) * n + x;
                        match layout {
                            Layout::ChannelsFirst => dst[first] = src[last],
                            Layout::ChannelsLast => dst[last] = src[first],
                        }
                    }
                }
            }
        }
        Self { dims: dims_for(self.batch(), n, layout), layout, values }
    }
}

fn dims_for(batch: usize, size: usize, layout: Layout) -> [usize; 4] {
    match layout {
        Layout::ChannelsFirst => [batch, 3, size, size],
        Layout::ChannelsLast => [batch, size, size, 3],
    }
}

/// Copies the centered n×n square out of `frame`.
pub fn center_crop(frame: &ImageFrame, size: usize) -> Result<(RgbImage, CropRect)> {
    let (w, h) = (frame.width(), frame.height());
    if size == 0 || size > w.min(h) {
        return Err(Error::FrameTooSmall { width: w, height: h, size });
    }
    let rect = CropRect { x: (w - size) / 2, y: (h - size) / 2, size };
    Ok((crop(frame, rect.x, rect.y, size, size), rect))
}

/// Copies an arbitrary in-bounds rectangle.
pub fn crop(frame: &ImageFrame, x: usize, y: usize, width: usize, height: usize) -> RgbImage {
    let row = frame.width() * 3;
    let mut data = Vec::with_capacity(width * height * 3);
    for yy in y..y + height {
        let start = yy * row + x * 3;
        data.extend_from_slice(&frame.pixels()[start..start + width * 3]);
    }
    RgbImage { width, height, data }
}

/// Divides by 255; no mean/std re-centering.
pub fn normalize(image: &RgbImage) -> NormalizedImage {
    NormalizedImage {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
    }
}

pub fn to_tensor(image: &NormalizedImage, layout: Layout) -> Result<InputTensor> {
    if image.width != image.height {
        return Err(Error::Shape(format!("tensor input must be square, got {}x{}", image.width, image.height)));
    }
    let n = image.width;
    let interleaved = InputTensor {
        dims: dims_for(1, n, Layout::ChannelsLast),
        layout: Layout::ChannelsLast,
        values: image.data.clone(),
    };
    Ok(interleaved.to_layout(layout))
}

pub fn preprocess(frame: &ImageFrame, size: usize, layout: Layout) -> Result<(InputTensor, CropRect)> {
    let (cropped, rect) = center_crop(frame, size)?;
    let tensor = to_tensor(&normalize(&cropped), layout)?;
    Ok((tensor, rect))
}
