//! Latency measurement: warm-up then repeated timed runs with a per-stage
//! breakdown, grid sweeps over variants and input sizes, the pixel-count
//! scaling fit and the tiled-versus-single comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::{from_kind, Clock, ClockKind};
use crate::decode::{DecodeConfig, DetectionRecord};
use crate::engine::ModelSource;
use crate::error::{Error, Result};
use crate::evalmap::{evaluate, EvalConfig, EvalDataset, EvalResult};
use crate::frame::ImageFrame;
use crate::pipeline::{Pipeline, RunDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    Inference,
    Postprocess,
    Merge,
    Anchor,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Preprocess, Stage::Inference, Stage::Postprocess, Stage::Merge, Stage::Anchor, Stage::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Inference => "inference",
            Stage::Postprocess => "postprocess",
            Stage::Merge => "merge",
            Stage::Anchor => "anchor",
            Stage::Total => "total",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Parse { context: "stage".into(), reason: format!("unknown stage {s:?}") })
    }
}

/// Brackets pipeline stages with clock reads for one run.
pub struct StageTimer<'a> {
    clock: &'a dyn Clock,
    elapsed_ms: BTreeMap<Stage, f64>,
}

impl<'a> StageTimer<'a> {
    pub fn new(clock: &'a dyn Clock) -> Self {
        Self { clock, elapsed_ms: BTreeMap::new() }
    }

    /// Runs `f`, charging its duration to `stage`. Repeated stages accumulate.
    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = self.clock.now_ns();
        let out = f();
        let end = self.clock.now_ns();
        *self.elapsed_ms.entry(stage).or_default() += end.saturating_sub(start) as f64 / 1e6;
        out
    }

    pub fn elapsed_ms(&self) -> &BTreeMap<Stage, f64> {
        &self.elapsed_ms
    }

    pub fn into_elapsed_ms(self) -> BTreeMap<Stage, f64> {
        self.elapsed_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingProtocol {
    pub warmup_iterations: usize,
    pub repetitions: usize,
    /// Keep every per-run sample in the report.
    #[serde(default)]
    pub keep_raw: bool,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        Self { warmup_iterations: 10, repetitions: 100, keep_raw: false }
    }
}

impl TimingProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 2 {
            return Err(Error::Config(format!("need at least 2 repetitions, got {}", self.repetitions)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub mean_ms: f64,
    /// Population standard deviation.
    pub std_ms: f64,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_ms: Option<Vec<f64>>,
}

impl StageTiming {
    pub fn from_samples(stage: Stage, samples: &[f64], keep_raw: bool) -> Self {
        let (mean_ms, std_ms) = mean_std(samples);
        Self { stage, mean_ms, std_ms, samples: samples.len(), raw_ms: keep_raw.then(|| samples.to_vec()) }
    }
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: RunDescriptor,
    /// Stage order, `total` last.
    pub stages: Vec<StageTiming>,
    pub protocol: TimingProtocol,
    pub clock: ClockKind,
    pub environment: String,
}

impl LatencyReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn total(&self) -> &StageTiming {
        self.stage(Stage::Total).expect("reports always carry a total")
    }

    /// One line per stage: `stage  mean_ms  std_ms  samples`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("stage\tmean_ms\tstd_ms\tsamples\n");
        for s in &self.stages {
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{}", s.stage, s.mean_ms, s.std_ms, s.samples);
        }
        out
    }
}

/// Free-text description of the measuring host.
pub fn environment_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}/{}, {threads} hardware threads", std::env::consts::OS, std::env::consts::ARCH)
}

/// Runs `protocol.warmup_iterations` untimed passes, then times
/// `protocol.repetitions` passes stage by stage.
pub fn time_pipeline(pipeline: &mut Pipeline, frame: &ImageFrame, protocol: &TimingProtocol) -> Result<LatencyReport> {
    protocol.validate()?;
    let clock = pipeline.session().clock().clone();
    let calls_before = pipeline.session().call_count();
    let abort = |completed: usize| move |e: Error| Error::TimingAborted { completed, source: Box::new(e) };

    for _ in 0..protocol.warmup_iterations {
        pipeline.run(frame).map_err(abort(0))?;
    }
    let mut samples: BTreeMap<Stage, Vec<f64>> = BTreeMap::new();
    for rep in 0..protocol.repetitions {
        let mut timer = StageTimer::new(clock.as_ref());
        let start = clock.now_ns();
        pipeline.run_timed(frame, &mut timer).map_err(abort(rep))?;
        let total = clock.now_ns().saturating_sub(start) as f64 / 1e6;
        let mut elapsed = timer.into_elapsed_ms();
        elapsed.insert(Stage::Total, total);
        for (stage, ms) in elapsed {
            samples.entry(stage).or_default().push(ms);
        }
    }

    let runs = (protocol.warmup_iterations + protocol.repetitions) as u64;
    let calls = pipeline.session().call_count() - calls_before;
    if calls != runs {
        return Err(Error::Config(format!(
            "session ran {calls} inferences during {runs} timed or warm-up runs; it must not be shared while timing"
        )));
    }

    let stages = samples
        .iter()
        .map(|(&stage, s)| {
            if s.len() != protocol.repetitions {
                return Err(Error::Data(format!(
                    "stage {stage} ran in only {} of {} runs",
                    s.len(),
                    protocol.repetitions
                )));
            }
            Ok(StageTiming::from_samples(stage, s, protocol.keep_raw))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatencyReport {
        config: pipeline.describe(),
        stages,
        protocol: *protocol,
        clock: clock.kind(),
        environment: environment_note(),
    })
}

/// Runs the pipeline over every dataset image and scores the detections.
pub fn evaluate_pipeline(pipeline: &mut Pipeline, dataset: &EvalDataset, config: &EvalConfig) -> Result<EvalResult> {
    let mut records = Vec::new();
    for (image_id, frame) in &dataset.images {
        for det in pipeline.run(frame)?.detections {
            let category = dataset.category_id(det.category)?;
            records.push(DetectionRecord::new(*image_id, category, &det));
        }
    }
    evaluate(&records, &dataset.ground_truth, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant_name: String,
    pub input_size: usize,
    pub mean_total_ms: f64,
    pub std_ms: f64,
    #[serde(default)]
    pub map50: Option<f64>,
    #[serde(default)]
    pub map50_95: Option<f64>,
    #[serde(default)]
    pub parameter_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub variant_name: String,
    pub input_size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    #[serde(default)]
    pub failures: Vec<SweepFailure>,
}

const SWEEP_HEADER: &str = "variant\tinput_size\tmean_total_ms\tstd_ms\tmap50\tmap50_95\tparameter_count";
const FAILURE_PREFIX: &str = "#failed";

fn opt_cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl SweepTable {
    pub fn row(&self, variant: &str, size: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant_name == variant && r.input_size == size)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if !seen.insert((r.variant_name.as_str(), r.input_size)) {
                return Err(Error::Data(format!("duplicate sweep row {}@{}", r.variant_name, r.input_size)));
            }
            if !(r.mean_total_ms.is_finite() && r.mean_total_ms >= 0.0) {
                return Err(Error::Data(format!("row {}@{} has invalid latency", r.variant_name, r.input_size)));
            }
        }
        Ok(())
    }

    /// Header plus one tab-separated line per row; absent values are empty
    /// cells and failures follow as `#failed` lines. Other lines starting
    /// with `#` are comments.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let map50 = r.map50.map(|v| format!("{v:.6}"));
            let map50_95 = r.map50_95.map(|v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{}\t{}\t{}",
                r.variant_name,
                r.input_size,
                r.mean_total_ms,
                r.std_ms,
                opt_cell(map50),
                opt_cell(map50_95),
                opt_cell(r.parameter_count)
            );
        }
        for f in &self.failures {
            let _ = writeln!(
                out,
                "{FAILURE_PREFIX}\t{}\t{}\t{}",
                f.variant_name,
                f.input_size,
                f.reason.replace(['\t', '\n'], " ")
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Parse { context: format!("sweep table line {line}"), reason };
        let comment = |l: &str| l.starts_with('#') && !l.starts_with(FAILURE_PREFIX);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !comment(l));
        match lines.next() {
            Some((_, header)) if header.trim_end() == SWEEP_HEADER => {}
            _ => return Err(bad(1, "missing or unexpected header".into())),
        }
        let mut table = SweepTable::default();
        for (i, line) in lines {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells[0] == FAILURE_PREFIX {
                if cells.len() != 4 {
                    return Err(bad(i + 1, "failure lines have 4 cells".into()));
                }
                let input_size = cells[2].parse().map_err(|e| bad(i + 1, format!("input_size: {e}")))?;
                table.failures.push(SweepFailure {
                    variant_name: cells[1].into(),
                    input_size,
                    reason: cells[3].into(),
                });
                continue;
            }
            if cells.len() != 7 {
                return Err(bad(i + 1, format!("expected 7 cells, found {}", cells.len())));
            }
            fn num<T: std::str::FromStr>(cell: &str) -> std::result::Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                cell.trim().parse().map_err(|e: T::Err| format!("{cell:?}: {e}"))
            }
            fn opt<T: std::str::FromStr>(cell: &str) -> std::result::Result<Option<T>, String>
            where
                T::Err: std::fmt::Display,
            {
                if cell.trim().is_empty() {
                    Ok(None)
                } else {
                    num(cell).map(Some)
                }
            }
            let row = (|| {
                Ok::<_, String>(SweepRow {
                    variant_name: cells[0].into(),
                    input_size: num(cells[1])?,
                    mean_total_ms: num(cells[2])?,
                    std_ms: num(cells[3])?,
                    map50: opt(cells[4])?,
                    map50_95: opt(cells[5])?,
                    parameter_count: opt(cells[6])?,
                })
            })()
            .map_err(|e| bad(i + 1, e))?;
            table.rows.push(row);
        }
        table.validate()?;
        Ok(table)
    }

    /// Reads a table written as TSV, or as JSON when the path ends in `.json`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table = if path.extension().is_some_and(|e| e == "json") {
            let t: SweepTable = serde_json::from_str(&text).map_err(|e| Error::Parse {
                context: path.display().to_string(),
                reason: format!("{e} (line {}, column {})", e.line(), e.column()),
            })?;
            t.validate()?;
            t
        } else {
            Self::from_tsv(&text).map_err(|e| match e {
                Error::Parse { context, reason } => {
                    Error::Parse { context: format!("{}: {context}", path.display()), reason }
                }
                other => other,
            })?
        };
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?
        } else {
            self.to_tsv()
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions<'a> {
    pub decode: DecodeConfig,
    pub clock: Option<ClockKind>,
    /// When set, mAP columns are filled by evaluating each cell on it.
    pub dataset: Option<&'a EvalDataset>,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub table: SweepTable,
    /// Full reports of the successful cells, in row order.
    pub reports: Vec<LatencyReport>,
}

/// Clock used when none is requested: virtual for the mock backend, wall otherwise.
pub fn default_clock(source: &ModelSource) -> ClockKind {
    match source {
        ModelSource::Mock(_) => ClockKind::Virtual,
        _ => ClockKind::Wall,
    }
}

fn sweep_cell(
    source: &ModelSource,
    size: usize,
    protocol: &TimingProtocol,
    frame: &ImageFrame,
    options: &SweepOptions<'_>,
) -> Result<(SweepRow, LatencyReport)> {
    let clock = from_kind(options.clock.unwrap_or_else(|| default_clock(source)));
    let session = source.open(Some(size), clock)?;
    let parameter_count = session.descriptor().parameter_count;
    let mut pipeline = Pipeline::new(session, options.decode)?;
    let report = time_pipeline(&mut pipeline, frame, protocol)?;
    let accuracy = options.dataset.map(|ds| evaluate_pipeline(&mut pipeline, ds, &options.eval)).transpose()?;
    let total = report.total();
    let row = SweepRow {
        variant_name: source.variant_name(),
        input_size: size,
        mean_total_ms: total.mean_ms,
        std_ms: total.std_ms,
        map50: accuracy.as_ref().map(|a| a.map50),
        map50_95: accuracy.as_ref().map(|a| a.map50_95),
        parameter_count,
    };
    Ok((row, report))
}

/// Times every (model, size) cell on `frame`. Failing cells are recorded with
/// their reason and the sweep continues.
pub fn sweep(
    models: &[ModelSource],
    sizes: &[usize],
    protocol: &TimingProtocol,
    frame: &ImageFrame,
    options: &SweepOptions<'_>,
) -> Result<SweepResult> {
    protocol.validate()?;
    options.decode.validate()?;
    let mut result = SweepResult { table: SweepTable::default(), reports: Vec::new() };
    let mut seen = BTreeSet::new();
    for source in models {
        for &size in sizes {
            let variant_name = source.variant_name();
            if !seen.insert((variant_name.clone(), size)) {
                result.table.failures.push(SweepFailure {
                    variant_name,
                    input_size: size,
                    reason: "duplicate cell".into(),
                });
                continue;
            }
            match sweep_cell(source, size, protocol, frame, options) {
                Ok((row, report)) => {
                    log::info!("{}@{}: {:.2} ms", row.variant_name, size, row.mean_total_ms);
                    result.table.rows.push(row);
                    result.reports.push(report);
                }
                Err(e) => {
                    log::warn!("{variant_name}@{size} failed: {e}");
                    result.table.failures.push(SweepFailure { variant_name, input_size: size, reason: e.to_string() });
                }
            }
        }
    }
    Ok(result)
}

/// Least-squares line of latency against pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope_ms_per_pixel: f64,
    pub intercept_ms: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Fits mean total latency against network pixels per run.
pub fn fit_pixel_scaling(reports: &[LatencyReport]) -> Result<ScalingFit> {
    let points: Vec<(f64, f64)> = reports.iter().map(|r| (r.config.pixels() as f64, r.total().mean_ms)).collect();
    fit_points(&points)
}

/// Ordinary least squares over (pixels, ms); needs 3 distinct pixel counts.
pub fn fit_points(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let distinct: BTreeSet<u64> = points.iter().map(|p| p.0.to_bits()).collect();
    if distinct.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "scaling fit needs at least 3 distinct input sizes, got {}",
            distinct.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(ScalingFit { slope_ms_per_pixel: slope, intercept_ms: intercept, r_squared, points: points.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiledComparison {
    pub tiled: LatencyReport,
    pub single: LatencyReport,
    /// Tiled total mean over single total mean.
    pub ratio: f64,
}

/// Times the `region` cut into `tile`-sized tiles as one batch against a single
/// square input whose side is the region's longer side.
#[allow(clippy::too_many_arguments)]
pub fn compare_tiled(
    source: &ModelSource,
    region: (usize, usize),
    tile: usize,
    overlap: usize,
    protocol: &TimingProtocol,
    frame: &ImageFrame,
    decode: &DecodeConfig,
    clock: Option<ClockKind>,
) -> Result<TiledComparison> {
    let kind = clock.unwrap_or_else(|| default_clock(source));
    let session = source.open(Some(tile), from_kind(kind))?;
    let mut tiled = Pipeline::new(session, *decode)?.tiled(region.0, region.1, overlap)?;
    let tiled = time_pipeline(&mut tiled, frame, protocol)?;

    let side = region.0.max(region.1);
    let session = source.open(Some(side), from_kind(kind))?;
    let mut single = Pipeline::new(session, *decode)?;
    let single = time_pipeline(&mut single, frame, protocol)?;

    let ratio = tiled.total().mean_ms / single.total().mean_ms;
    Ok(TiledComparison { tiled, single, ratio })
}
