use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use edgedet::clock::from_kind;
use edgedet::decode::DecodeConfig;
use edgedet::engine::{LoadOptions, ModelSource};
use edgedet::evalmap::{self, EvalConfig, EvalDataset, COCO80_TO_COCO91};
use edgedet::frame::{synthetic_stream, ImageFrame, SyntheticSpec};
use edgedet::geometry::AnchorRecord;
use edgedet::profiler::{self, default_clock, SweepOptions, SweepTable, TimingProtocol};
use edgedet::selector::{pareto_frontier, select_config, Budget, Metric};
use edgedet::{DetectionRecord, LatencyReport, Pipeline};
use serde::Serialize;

use crate::config::{BackendChoice, RunConfig};
use crate::sidecar::{parse_policy, read_sidecar};

pub const TOOL: &str = "edgedet";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Envelope of every structured report.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    result: T,
}

fn write_report<T: Serialize>(path: &Path, command: &'static str, config: &RunConfig, result: T) -> Result<()> {
    let report = Report { tool: TOOL, version: VERSION, command, config, result };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `# key value` lines that put tool version and config in tabular files.
fn tsv_preamble(command: &str, config: &RunConfig) -> Result<String> {
    Ok(format!("# {TOOL} {VERSION} {command}\n# config {}\n", serde_json::to_string(config)?))
}

fn decode_config(cfg: &RunConfig) -> Result<DecodeConfig> {
    let d = DecodeConfig {
        confidence_threshold: cfg.conf,
        nms_iou_threshold: cfg.iou,
        max_detections: cfg.max_detections,
        ..Default::default()
    };
    d.validate()?;
    Ok(d)
}

fn protocol(cfg: &RunConfig) -> Result<TimingProtocol> {
    let p = TimingProtocol { warmup_iterations: cfg.warmup, repetitions: cfg.reps, keep_raw: cfg.raw };
    p.validate()?;
    Ok(p)
}

fn variant_name(model: &Path) -> String {
    model.file_stem().map_or_else(|| model.display().to_string(), |s| s.to_string_lossy().into_owned())
}

const MOCK_DEFAULT_SIZE: usize = 160;

fn model_source(cfg: &RunConfig, model: &Path, size: Option<usize>) -> Result<ModelSource> {
    Ok(match cfg.backend {
        BackendChoice::Reference => {
            if !model.exists() && std::env::var_os(edgedet::engine::MODEL_CACHE_ENV).is_none() {
                bail!("model file {} does not exist", model.display());
            }
            ModelSource::Onnx {
                path: model.to_path_buf(),
                options: LoadOptions { size, layout: cfg.layout.layout(), ..Default::default() },
            }
        }
        BackendChoice::Mock => {
            let layout = cfg.layout.layout().unwrap_or_default();
            ModelSource::Mock(cfg.mock.spec(&variant_name(model), size.unwrap_or(MOCK_DEFAULT_SIZE), layout)?)
        }
        BackendChoice::Accelerated => ModelSource::Accelerated { path: model.to_path_buf() },
    })
}

fn models(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match (cfg.models.is_empty(), cfg.backend) {
        (false, _) => Ok(cfg.models.clone()),
        (true, BackendChoice::Mock) => Ok(vec![PathBuf::from("mock")]),
        (true, _) => bail!("--model is required"),
    }
}

fn single_model(cfg: &RunConfig) -> Result<PathBuf> {
    let all = models(cfg)?;
    if all.len() > 1 {
        bail!("this command takes one --model, got {}", all.len());
    }
    Ok(all.into_iter().next().expect("non-empty"))
}

fn load_image(path: &Path, frame_id: u64, timestamp_ns: u64) -> Result<ImageFrame> {
    let rgb = image::open(path).with_context(|| format!("reading image {}", path.display()))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(ImageFrame::new(frame_id, w, h, rgb.into_raw(), timestamp_ns)?)
}

/// The timing input: the first `--image`, else a seeded synthetic frame.
fn timing_frame(cfg: &RunConfig) -> Result<ImageFrame> {
    if let Some(path) = cfg.images.first() {
        return load_image(path, 0, 0);
    }
    let [w, h] = cfg.frame_size;
    let stream = synthetic_stream(&SyntheticSpec::new(w, h, 30.0, 1, cfg.seed))?;
    Ok(stream.into_iter().next().expect("one frame").0)
}

fn image_ids(cfg: &RunConfig) -> Result<Vec<u64>> {
    let by_name: HashMap<String, u64> = match &cfg.annotations {
        Some(path) => evalmap::load_dataset(path, &cfg.group_attribute)?
            .images
            .into_iter()
            .map(|im| (im.file_name, im.id))
            .collect(),
        None => HashMap::new(),
    };
    Ok(cfg
        .images
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            by_name
                .get(&name)
                .copied()
                .or_else(|| path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()))
                .unwrap_or(i as u64 + 1)
        })
        .collect())
}

fn category_map(cfg: &RunConfig) -> Option<Vec<u64>> {
    cfg.coco91.then(|| COCO80_TO_COCO91.to_vec())
}

fn with_tiling(pipeline: Pipeline, cfg: &RunConfig, frame: &ImageFrame) -> Result<Pipeline> {
    if cfg.tile.is_none() {
        return Ok(pipeline);
    }
    let [w, h] = cfg.region.unwrap_or([frame.width(), frame.height()]);
    Ok(pipeline.tiled(w, h, cfg.overlap)?)
}

fn open_pipeline(cfg: &RunConfig, model: &Path) -> Result<(ModelSource, Pipeline)> {
    let size = cfg.tile.or_else(|| cfg.sizes.first().copied());
    let source = model_source(cfg, model, size)?;
    let clock = from_kind(cfg.clock_kind().unwrap_or_else(|| default_clock(&source)));
    let session = source.open(size, clock)?;
    for w in &session.descriptor().warnings {
        log::warn!("{w}");
    }
    let pipeline = Pipeline::new(session, decode_config(cfg)?)?;
    Ok((source, pipeline))
}

#[derive(Serialize)]
struct DetectSummary {
    images: Vec<ImageSummary>,
    detections: usize,
    anchored: bool,
}

#[derive(Serialize)]
struct ImageSummary {
    path: PathBuf,
    image_id: u64,
    detections: usize,
}

pub fn detect(cfg: &RunConfig) -> Result<()> {
    if cfg.images.is_empty() {
        bail!("detect needs at least one --image");
    }
    let output = cfg.output.as_ref().ok_or_else(|| anyhow!("detect needs --output for the results file"))?;
    let (_, mut pipeline) = open_pipeline(cfg, &single_model(cfg)?)?;
    let mut timestamp_ns = 0;
    if let Some(poses) = &cfg.poses {
        let sidecar = read_sidecar(poses, parse_policy(&cfg.policy)?)?;
        timestamp_ns = sidecar.frame_timestamp_ns;
        pipeline = pipeline.with_anchoring(sidecar.setup)?;
    }
    let ids = image_ids(cfg)?;
    let dataset = EvalDataset { images: Vec::new(), ground_truth: Vec::new(), category_map: category_map(cfg) };

    let mut records = Vec::new();
    let mut summary = DetectSummary { images: Vec::new(), detections: 0, anchored: cfg.poses.is_some() };
    for (i, (path, &image_id)) in cfg.images.iter().zip(&ids).enumerate() {
        let frame = load_image(path, i as u64, timestamp_ns)?;
        pipeline = with_tiling(pipeline, cfg, &frame)?;
        let out = pipeline.run(&frame).with_context(|| format!("detecting on {}", path.display()))?;
        for (k, det) in out.detections.iter().enumerate() {
            let mut record = DetectionRecord::new(image_id, dataset.category_id(det.category)?, det);
            record.anchor = out.anchors.get(k).map(AnchorRecord::from);
            records.push(record);
        }
        log::info!("{}: {} detections", path.display(), out.detections.len());
        summary.images.push(ImageSummary { path: path.clone(), image_id, detections: out.detections.len() });
        summary.detections += out.detections.len();
    }
    let mut text = serde_json::to_string_pretty(&records)?;
    text.push('\n');
    std::fs::write(output, text).with_context(|| format!("writing {}", output.display()))?;
    let report = Report { tool: TOOL, version: VERSION, command: "detect", config: cfg, result: summary };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn latency_table(report: &LatencyReport) -> String {
    let c = &report.config;
    let mut out = format!(
        "{} @ {} ({} backend, batch {}, {:?} clock, {} warm-up + {} timed runs)\n",
        c.variant_name,
        c.input_size,
        c.backend,
        c.batch,
        report.clock,
        report.protocol.warmup_iterations,
        report.protocol.repetitions
    );
    let _ = writeln!(out, "{:<12} {:>12} {:>10}", "stage", "mean ms", "std ms");
    for s in &report.stages {
        let _ = writeln!(out, "{:<12} {:>12.2} {:>10.2}", s.stage.as_str(), s.mean_ms, s.std_ms);
    }
    out
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let protocol = protocol(cfg)?;
    let frame = timing_frame(cfg)?;
    let (_, pipeline) = open_pipeline(cfg, &single_model(cfg)?)?;
    let mut pipeline = with_tiling(pipeline, cfg, &frame)?;
    let report = profiler::time_pipeline(&mut pipeline, &frame, &protocol)?;
    print!("{}", latency_table(&report));
    if let Some(path) = &cfg.output {
        if path.extension().is_some_and(|e| e == "tsv") {
            std::fs::write(path, tsv_preamble("bench", cfg)? + &report.to_tsv())?;
        } else {
            write_report(path, "bench", cfg, &report)?;
        }
    }
    Ok(())
}

fn load_eval_dataset(cfg: &RunConfig) -> Result<Option<EvalDataset>> {
    let Some(annotations) = &cfg.annotations else { return Ok(None) };
    if cfg.images.is_empty() {
        bail!("--annotations needs the matching --image files to evaluate");
    }
    let ground_truth = evalmap::load_annotations(annotations, &cfg.group_attribute)?;
    let ids = image_ids(cfg)?;
    let images = cfg
        .images
        .iter()
        .zip(ids)
        .enumerate()
        .map(|(i, (path, id))| Ok((id, load_image(path, i as u64, 0)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(EvalDataset { images, ground_truth, category_map: category_map(cfg) }))
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    table: &'a SweepTable,
    scaling_fit: Option<profiler::ScalingFit>,
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let protocol = protocol(cfg)?;
    if cfg.sizes.is_empty() {
        bail!("sweep needs at least one --size");
    }
    let frame = timing_frame(cfg)?;
    let sources =
        models(cfg)?.iter().map(|m| model_source(cfg, m, cfg.sizes.first().copied())).collect::<Result<Vec<_>>>()?;
    let dataset = load_eval_dataset(cfg)?;
    let options = SweepOptions {
        decode: decode_config(cfg)?,
        clock: cfg.clock_kind(),
        dataset: dataset.as_ref(),
        eval: EvalConfig::default(),
    };
    let result = profiler::sweep(&sources, &cfg.sizes, &protocol, &frame, &options)?;
    let fit = profiler::fit_pixel_scaling(&result.reports).ok();

    let mut text = result.table.to_tsv();
    if let Some(f) = &fit {
        let _ = writeln!(
            text,
            "# scaling fit: {:.6e} ms/pixel, intercept {:.4} ms, r2 {:.6}",
            f.slope_ms_per_pixel, f.intercept_ms, f.r_squared
        );
    }
    print!("{text}");
    if let Some(path) = &cfg.output {
        if path.extension().is_some_and(|e| e == "json") {
            write_report(path, "sweep", cfg, SweepOutput { table: &result.table, scaling_fit: fit })?;
        } else {
            std::fs::write(path, tsv_preamble("sweep", cfg)? + &text)?;
        }
    }
    if result.table.rows.is_empty() {
        bail!("every sweep cell failed");
    }
    Ok(())
}

pub fn tile_bench(cfg: &RunConfig) -> Result<()> {
    let protocol = protocol(cfg)?;
    let tile = cfg.tile.or_else(|| cfg.sizes.first().copied()).unwrap_or(MOCK_DEFAULT_SIZE);
    let region = cfg.region.unwrap_or([2 * tile, tile]);
    let frame = timing_frame(cfg)?;
    let source = model_source(cfg, &single_model(cfg)?, Some(tile))?;
    let cmp = profiler::compare_tiled(
        &source,
        (region[0], region[1]),
        tile,
        cfg.overlap,
        &protocol,
        &frame,
        &decode_config(cfg)?,
        cfg.clock_kind(),
    )?;
    print!("{}", latency_table(&cmp.tiled));
    print!("{}", latency_table(&cmp.single));
    println!("tiled / single total latency: {:.4}", cmp.ratio);
    if let Some(path) = &cfg.output {
        write_report(path, "tile-bench", cfg, &cmp)?;
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<SweepTable> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(table) = value.get_mut("result").and_then(|r| r.get_mut("table")) {
            value = table.take();
        }
        let table: SweepTable = serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        table.validate()?;
        Ok(table)
    } else {
        Ok(SweepTable::read(path)?)
    }
}

#[derive(Serialize)]
struct Selection<'a> {
    budget: Budget,
    chosen: &'a profiler::SweepRow,
    feasible: usize,
    rows: usize,
    frontier: Vec<&'a profiler::SweepRow>,
}

pub fn select(cfg: &RunConfig) -> Result<()> {
    let path = cfg.table.as_ref().ok_or_else(|| anyhow!("select needs --table"))?;
    let limit = cfg.budget_ms.ok_or_else(|| anyhow!("select needs --budget-ms"))?;
    let table = read_table(path)?;
    let budget = Budget::new(limit, Metric::from(cfg.metric))?;
    let chosen = select_config(&table, &budget)?;
    let feasible = table.rows.iter().filter(|r| r.mean_total_ms <= limit).count();
    let frontier = pareto_frontier(&table, budget.metric)?;
    println!(
        "{} @ {}: {:.2} ms, {} {:.4} ({} of {} rows within {} ms)",
        chosen.variant_name,
        chosen.input_size,
        chosen.mean_total_ms,
        budget.metric,
        budget.metric.of(chosen).unwrap_or(f64::NAN),
        feasible,
        table.rows.len(),
        limit
    );
    if let Some(out) = &cfg.output {
        let rows = table.rows.len();
        write_report(out, "select", cfg, Selection { budget, chosen, feasible, rows, frontier })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    result: evalmap::EvalResult,
    #[serde(skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    recall_by_group: std::collections::BTreeMap<String, evalmap::GroupRecall>,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let dets = cfg.detections.as_ref().ok_or_else(|| anyhow!("eval needs --detections"))?;
    let anns = cfg.annotations.as_ref().ok_or_else(|| anyhow!("eval needs --annotations"))?;
    let detections = evalmap::load_detections(dets)?;
    let ground_truth = evalmap::load_annotations(anns, &cfg.group_attribute)?;
    let config = EvalConfig { max_detections_per_image: cfg.max_detections, ..Default::default() };
    let result = evalmap::evaluate(&detections, &ground_truth, &config)?;
    let groups = evalmap::recall_by_group(&detections, &ground_truth, cfg.recall_iou, cfg.score_threshold);
    println!(
        "mAP@50 {:.4}  mAP@50-95 {:.4}  ({} images, {} ground truths, {} detections)",
        result.map50, result.map50_95, result.images, result.ground_truths, result.detections
    );
    for (group, r) in &groups {
        println!("recall[{group}] {:.4} ({}/{})", r.recall, r.matched, r.ground_truths);
    }
    if let Some(out) = &cfg.output {
        write_report(out, "eval", cfg, EvalOutput { result, recall_by_group: groups })?;
    }
    std::io::stdout().flush()?;
    Ok(())
}
