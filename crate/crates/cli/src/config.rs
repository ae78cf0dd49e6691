//! Run configuration: defaults, overlaid by a config file, overlaid by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use edgedet::clock::ClockKind;
use edgedet::engine::{MockDelays, MockOutput, MockSpec};
use edgedet::selector::Metric;
use edgedet::Layout;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    #[default]
    Reference,
    Mock,
    Accelerated,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutChoice {
    #[default]
    Auto,
    NchwLike,
    NhwcLike,
}

impl LayoutChoice {
    pub fn layout(self) -> Option<Layout> {
        match self {
            LayoutChoice::Auto => None,
            LayoutChoice::NchwLike => Some(Layout::ChannelsFirst),
            LayoutChoice::NhwcLike => Some(Layout::ChannelsLast),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ClockChoice {
    /// Virtual for the mock backend, wall otherwise.
    #[default]
    Auto,
    Wall,
    Virtual,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MetricChoice {
    Map50,
    #[default]
    Map50_95,
}

impl From<MetricChoice> for Metric {
    fn from(m: MetricChoice) -> Self {
        match m {
            MetricChoice::Map50 => Metric::Map50,
            MetricChoice::Map50_95 => Metric::Map50_95,
        }
    }
}

/// Settings of the simulated backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Preprocess, inference and postprocess delays.
    pub delay_ms: [f64; 3],
    pub per_pixel_ms: f64,
    pub categories: usize,
    /// Content-rule block size when no canned boxes are given.
    pub cell: usize,
    /// Canned candidates as `[cx, cy, w, h, score, class]`, network-input pixels.
    pub boxes: Vec<[f64; 6]>,
    pub parameter_count: Option<u64>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            delay_ms: [0.0; 3],
            per_pixel_ms: 0.0,
            categories: 80,
            cell: 32,
            boxes: Vec::new(),
            parameter_count: None,
        }
    }
}

impl MockConfig {
    pub fn spec(&self, variant_name: &str, input_size: usize, layout: Layout) -> Result<MockSpec> {
        let delays = MockDelays {
            preprocess_ms: self.delay_ms[0],
            inference_fixed_ms: self.delay_ms[1],
            inference_per_pixel_ms: self.per_pixel_ms,
            postprocess_ms: self.delay_ms[2],
        };
        let output = if self.boxes.is_empty() {
            MockOutput::ContentRule { cell: self.cell.min(input_size).max(1) }
        } else {
            let c = self.categories;
            let k = self.boxes.len();
            let mut values = vec![0.0f32; (4 + c) * k];
            for (i, b) in self.boxes.iter().enumerate() {
                let class = b[5] as usize;
                if b[5] < 0.0 || class >= c {
                    bail!("mock box class {} outside 0..{c}", b[5]);
                }
                for (ch, v) in b[..4].iter().enumerate() {
                    values[ch * k + i] = *v as f32;
                }
                values[(4 + class) * k + i] = b[4] as f32;
            }
            MockOutput::Canned { dims: [1, 4 + c, k], values }
        };
        let spec = MockSpec {
            variant_name: variant_name.into(),
            input_size,
            layout,
            category_count: self.categories,
            parameter_count: self.parameter_count,
            delays,
            output,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Fully resolved settings of one invocation; echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub models: Vec<PathBuf>,
    pub backend: BackendChoice,
    pub sizes: Vec<usize>,
    pub layout: LayoutChoice,
    pub conf: f64,
    pub iou: f64,
    pub max_detections: usize,
    pub region: Option<[usize; 2]>,
    pub tile: Option<usize>,
    pub overlap: usize,
    pub warmup: usize,
    pub reps: usize,
    pub raw: bool,
    pub clock: ClockChoice,
    pub budget_ms: Option<f64>,
    pub metric: MetricChoice,
    pub images: Vec<PathBuf>,
    pub frame_size: [usize; 2],
    pub annotations: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub policy: String,
    pub coco91: bool,
    pub group_attribute: String,
    pub score_threshold: f64,
    pub recall_iou: f64,
    pub seed: u64,
    pub mock: MockConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            backend: BackendChoice::Reference,
            sizes: Vec::new(),
            layout: LayoutChoice::Auto,
            conf: 0.25,
            iou: 0.45,
            max_detections: 100,
            region: None,
            tile: None,
            overlap: 0,
            warmup: 10,
            reps: 100,
            raw: false,
            clock: ClockChoice::Auto,
            budget_ms: None,
            metric: MetricChoice::Map50_95,
            images: Vec::new(),
            frame_size: [640, 480],
            annotations: None,
            detections: None,
            table: None,
            output: None,
            poses: None,
            policy: "ray".into(),
            coco91: false,
            group_attribute: edgedet::evalmap::DEFAULT_GROUP_ATTRIBUTE.into(),
            score_threshold: 0.25,
            recall_iou: 0.5,
            seed: 0,
            mock: MockConfig::default(),
        }
    }
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s.split_once(['x', 'X', ',']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([num(w)?, num(h)?])
}

fn parse_delays(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> =
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [infer] => Ok([0.0, *infer, 0.0]),
        [pre, infer, post] => Ok([*pre, *infer, *post]),
        _ => Err("expected INFER or PRE,INFER,POST".into()),
    }
}

fn parse_box(s: &str) -> Result<[f64; 6], String> {
    let parts: Vec<f64> =
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [cx, cy, w, h, score] => Ok([*cx, *cy, *w, *h, *score, 0.0]),
        [cx, cy, w, h, score, class] => Ok([*cx, *cy, *w, *h, *score, *class]),
        _ => Err("expected CX,CY,W,H,SCORE[,CLASS]".into()),
    }
}

/// Command-line overrides; every flag is optional and wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML or JSON config file, or a previous JSON report to re-run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// ONNX model path (or variant name for the mock backend); repeatable.
    #[arg(long = "model", global = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Network input side length; repeatable or comma-separated.
    #[arg(long = "size", global = true, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long, global = true, value_enum)]
    pub layout: Option<LayoutChoice>,
    /// Confidence threshold.
    #[arg(long, global = true)]
    pub conf: Option<f64>,
    /// NMS IoU threshold.
    #[arg(long, global = true)]
    pub iou: Option<f64>,
    #[arg(long, global = true)]
    pub max_det: Option<usize>,
    /// Region cut from the frame center for tiling, WIDTHxHEIGHT.
    #[arg(long, global = true, value_parser = parse_pair)]
    pub region: Option<[usize; 2]>,
    /// Tile side; enables tiled inference.
    #[arg(long, global = true)]
    pub tile: Option<usize>,
    #[arg(long, global = true)]
    pub overlap: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Keep per-iteration samples in reports.
    #[arg(long, global = true)]
    pub raw: bool,
    #[arg(long, global = true, value_enum)]
    pub clock: Option<ClockChoice>,
    #[arg(long, global = true)]
    pub budget_ms: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub metric: Option<MetricChoice>,
    /// Input image; repeatable.
    #[arg(long = "image", global = true)]
    pub images: Vec<PathBuf>,
    /// Size of the seeded synthetic frame used when no image is given.
    #[arg(long, global = true, value_parser = parse_pair)]
    pub frame_size: Option<[usize; 2]>,
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,
    #[arg(long, global = true)]
    pub detections: Option<PathBuf>,
    /// Sweep table to select from.
    #[arg(long, global = true)]
    pub table: Option<PathBuf>,
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Pose and intrinsics sidecar (TOML) enabling anchoring.
    #[arg(long, global = true)]
    pub poses: Option<PathBuf>,
    /// ray, depth:<meters> or plane:<file>.
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Map 80 contiguous class indices to sparse COCO category ids.
    #[arg(long, global = true)]
    pub coco91: bool,
    #[arg(long, global = true)]
    pub group_attribute: Option<String>,
    /// Score threshold for per-group recall.
    #[arg(long, global = true)]
    pub score_threshold: Option<f64>,
    /// IoU threshold for per-group recall.
    #[arg(long, global = true)]
    pub recall_iou: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Mock delays in ms: INFER or PRE,INFER,POST.
    #[arg(long, global = true, value_parser = parse_delays)]
    pub mock_delay_ms: Option<[f64; 3]>,
    /// Mock inference cost per input pixel in ms.
    #[arg(long, global = true)]
    pub mock_per_pixel_ms: Option<f64>,
    #[arg(long, global = true)]
    pub mock_categories: Option<usize>,
    /// Canned mock candidate CX,CY,W,H,SCORE[,CLASS]; repeatable.
    #[arg(long = "mock-box", global = true, value_parser = parse_box)]
    pub mock_boxes: Vec<[f64; 6]>,
    #[arg(long, global = true)]
    pub mock_params: Option<u64>,
}

/// Reads a config file: TOML, JSON, or a JSON report with an embedded config.
pub fn read_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("tool") && map.contains_key("config") => {
                map.remove("config").expect("checked")
            }
            other => other,
        };
        serde_json::from_value(value).with_context(|| format!("parsing config {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

impl Flags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => read_config_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(backend => backend, layout => layout, conf => conf, iou => iou, max_det => max_detections,
             overlap => overlap, warmup => warmup, reps => reps, clock => clock, metric => metric,
             frame_size => frame_size, policy => policy, group_attribute => group_attribute,
             score_threshold => score_threshold, recall_iou => recall_iou, seed => seed);
        macro_rules! set_opt {
            ($($flag:ident),* $(,)?) => {
                $(if self.$flag.is_some() { c.$flag = self.$flag.clone(); })*
            };
        }
        set_opt!(region, tile, budget_ms, annotations, detections, table, output, poses);
        if !self.models.is_empty() {
            c.models = self.models.clone();
        }
        if !self.sizes.is_empty() {
            c.sizes = self.sizes.clone();
        }
        if !self.images.is_empty() {
            c.images = self.images.clone();
        }
        c.raw |= self.raw;
        c.coco91 |= self.coco91;
        if let Some(d) = self.mock_delay_ms {
            c.mock.delay_ms = d;
        }
        if let Some(v) = self.mock_per_pixel_ms {
            c.mock.per_pixel_ms = v;
        }
        if let Some(v) = self.mock_categories {
            c.mock.categories = v;
        }
        if !self.mock_boxes.is_empty() {
            c.mock.boxes = self.mock_boxes.clone();
        }
        if self.mock_params.is_some() {
            c.mock.parameter_count = self.mock_params;
        }
        Ok(c)
    }
}

impl RunConfig {
    pub fn clock_kind(&self) -> Option<ClockKind> {
        match self.clock {
            ClockChoice::Auto => None,
            ClockChoice::Wall => Some(ClockKind::Wall),
            ClockChoice::Virtual => Some(ClockKind::Virtual),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "conf = 0.5\nreps = 7\nsizes = [160]\n[mock]\ndelay_ms = [1.0, 2.0, 3.0]\n").unwrap();
        let flags = Flags { config: Some(path), reps: Some(9), ..Default::default() };
        let c = flags.resolve().unwrap();
        assert_eq!(c.conf, 0.5);
        assert_eq!(c.reps, 9);
        assert_eq!(c.sizes, vec![160]);
        assert_eq!(c.iou, 0.45);
        assert_eq!(c.mock.delay_ms, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn config_round_trips_through_json_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let config = RunConfig { reps: 3, sizes: vec![96, 128], ..Default::default() };
        let report = serde_json::json!({"tool": "edgedet", "version": "x", "config": config, "result": {}});
        std::fs::write(&path, report.to_string()).unwrap();
        assert_eq!(read_config_file(&path).unwrap(), config);
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_pair("320x160").unwrap(), [320, 160]);
        assert!(parse_pair("320").is_err());
        assert_eq!(parse_delays("2,90,4").unwrap(), [2.0, 90.0, 4.0]);
        assert_eq!(parse_delays("5").unwrap(), [0.0, 5.0, 0.0]);
        assert_eq!(parse_box("80,80,20,20,0.9").unwrap(), [80.0, 80.0, 20.0, 20.0, 0.9, 0.0]);
    }

    #[test]
    fn canned_mock_spec() {
        let mock = MockConfig { categories: 2, boxes: vec![[80.0, 80.0, 20.0, 20.0, 0.9, 1.0]], ..Default::default() };
        let spec = mock.spec("m", 160, Layout::ChannelsFirst).unwrap();
        let raw = spec.canned_output().unwrap();
        assert_eq!(raw.dims(), [1, 6, 1]);
        assert_eq!(raw.values(), &[80.0, 80.0, 20.0, 20.0, 0.0, 0.9]);
        let bad = MockConfig { categories: 1, boxes: vec![[1.0, 1.0, 1.0, 1.0, 0.5, 3.0]], ..Default::default() };
        assert!(bad.spec("m", 160, Layout::ChannelsFirst).is_err());
    }
}
