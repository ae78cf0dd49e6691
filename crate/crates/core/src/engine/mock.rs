use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ModelDescriptor;
use crate::clock::{ms, Clock};
use crate::decode::RawOutput;
use crate::error::{Error, Result};
use crate::preprocess::{InputTensor, Layout};
use crate::profiler::Stage;

/// Simulated stage costs in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MockDelays {
    pub preprocess_ms: f64,
    pub inference_fixed_ms: f64,
    /// Inference cost per input pixel, summed over the batch.
    pub inference_per_pixel_ms: f64,
    pub postprocess_ms: f64,
}

impl MockDelays {
    pub fn inference_ms(&self, batch: usize, size: usize) -> f64 {
        self.inference_fixed_ms + self.inference_per_pixel_ms * (batch * size * size) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockOutput {
    /// A fixed batch-1 output, repeated for every batch entry.
    Canned { dims: [usize; 3], values: Vec<f32> },
    /// One candidate per `cell`×`cell` block of each slice: the box is the
    /// block, the category is its brightest channel and the score that
    /// channel's mean value. A pure function of slice content.
    ContentRule { cell: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    pub variant_name: String,
    pub input_size: usize,
    pub layout: Layout,
    pub category_count: usize,
    #[serde(default)]
    pub parameter_count: Option<u64>,
    #[serde(default)]
    pub delays: MockDelays,
    pub output: MockOutput,
}

impl MockSpec {
    pub fn canned(variant_name: &str, input_size: usize, raw: RawOutput) -> Self {
        Self {
            variant_name: variant_name.into(),
            input_size,
            layout: Layout::ChannelsFirst,
            category_count: raw.category_count(),
            parameter_count: None,
            delays: MockDelays::default(),
            output: MockOutput::Canned { dims: raw.dims(), values: raw.values().to_vec() },
        }
    }

    pub fn content_rule(variant_name: &str, input_size: usize, category_count: usize, cell: usize) -> Self {
        Self {
            variant_name: variant_name.into(),
            input_size,
            layout: Layout::ChannelsFirst,
            category_count,
            parameter_count: None,
            delays: MockDelays::default(),
            output: MockOutput::ContentRule { cell },
        }
    }

    pub fn with_delays(mut self, delays: MockDelays) -> Self {
        self.delays = delays;
        self
    }

    pub fn canned_output(&self) -> Option<RawOutput> {
        match &self.output {
            MockOutput::Canned { dims, values } => RawOutput::new(*dims, values.clone(), self.category_count).ok(),
            MockOutput::ContentRule { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.category_count == 0 {
            return Err(Error::Config("mock input size and category count must be positive".into()));
        }
        let d = &self.delays;
        if [d.preprocess_ms, d.inference_fixed_ms, d.inference_per_pixel_ms, d.postprocess_ms]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("mock delays must be finite and non-negative".into()));
        }
        match &self.output {
            MockOutput::Canned { dims, values } => {
                if dims[0] != 1 {
                    return Err(Error::Config("canned mock output must have batch 1".into()));
                }
                RawOutput::new(*dims, values.clone(), self.category_count)?.orientation()?;
            }
            MockOutput::ContentRule { cell } => {
                if *cell == 0 || *cell > self.input_size {
                    return Err(Error::Config(format!("content-rule cell {cell} must lie in 1..={}", self.input_size)));
                }
            }
        }
        Ok(())
    }

    pub(super) fn descriptor(&self) -> ModelDescriptor {
        let n = self.input_size;
        ModelDescriptor {
            source_path: None,
            variant_name: self.variant_name.clone(),
            input_extents: match self.layout {
                Layout::ChannelsFirst => [1, 3, n, n],
                Layout::ChannelsLast => [1, n, n, 3],
            },
            layout: self.layout,
            category_count: self.category_count,
            opset_version: 0,
            parameter_count: self.parameter_count,
            warnings: Vec::new(),
        }
    }
}

pub(super) struct MockBackend {
    spec: MockSpec,
    canned: Option<RawOutput>,
}

impl MockBackend {
    pub(super) fn new(spec: MockSpec) -> Self {
        let canned = spec.canned_output();
        Self { spec, canned }
    }

    pub(super) fn stage_delay(&self, stage: Stage) -> Duration {
        match stage {
            Stage::Preprocess => ms(self.spec.delays.preprocess_ms),
            Stage::Postprocess => ms(self.spec.delays.postprocess_ms),
            _ => Duration::ZERO,
        }
    }

    pub(super) fn infer(&mut self, tensor: &InputTensor, clock: &dyn Clock) -> Result<RawOutput> {
        let (batch, n) = (tensor.batch(), tensor.size());
        let out = match (&self.canned, &self.spec.output) {
            (Some(raw), _) => RawOutput::stack(&vec![raw.clone(); batch])?,
            (None, MockOutput::ContentRule { cell }) => {
                let parts = (0..batch)
                    .map(|b| content_rule(tensor, b, *cell, self.spec.category_count))
                    .collect::<Result<Vec<_>>>()?;
                RawOutput::stack(&parts)?
            }
            (None, MockOutput::Canned { .. }) => unreachable!("validated canned output always parses"),
        };
        clock.delay(ms(self.spec.delays.inference_ms(batch, n)));
        Ok(out)
    }
}

fn content_rule(tensor: &InputTensor, index: usize, cell: usize, categories: usize) -> Result<RawOutput> {
    let n = tensor.size();
    let slice = tensor.slice(index);
    let at = |c: usize, y: usize, x: usize| match tensor.layout() {
        Layout::ChannelsFirst => slice[(c * n + y) * n + x],
        Layout::ChannelsLast => slice[(y * n + x) * 3 + c],
    };
    let cells = n / cell;
    let count = cells * cells;
    let ch = 4 + categories;
    let mut values = vec![0.0f32; ch * count];
    for gy in 0..cells {
        for gx in 0..cells {
            let mut sums = [0.0f64; 3];
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    for (c, s) in sums.iter_mut().enumerate() {
                        *s += f64::from(at(c, y, x));
                    }
                }
            }
            let area = (cell * cell) as f64;
            let (best, mean) = sums.iter().map(|s| s / area).enumerate().fold((0, f64::NEG_INFINITY), |acc, (c, m)| {
                if m > acc.1 {
                    (c, m)
                } else {
                    acc
                }
            });
            let i = gy * cells + gx;
            let half = cell as f32 / 2.0;
            let row = [(gx * cell) as f32 + half, (gy * cell) as f32 + half, cell as f32, cell as f32];
            for (c, v) in row.into_iter().enumerate() {
                values[c * count + i] = v;
            }
            values[(4 + best % categories) * count + i] = mean as f32;
        }
    }
    RawOutput::new([1, ch, count], values, categories)
}
