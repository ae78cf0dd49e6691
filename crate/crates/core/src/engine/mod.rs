//! Model loading and the synchronous inference boundary.
//!
//! Two backends sit behind [`InferenceSession`]: a CPU backend that executes
//! ONNX graphs, and a deterministic mock whose outputs and simulated costs are
//! fully described by a [`MockSpec`].

mod metadata;
mod mock;
mod reference;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use metadata::{detect_layout, REFERENCE_MAX_OPSET};
pub use mock::{MockDelays, MockOutput, MockSpec};

use crate::clock::{self, SharedClock};
use crate::decode::RawOutput;
use crate::error::{Error, Result};
use crate::preprocess::{InputTensor, Layout};
use crate::profiler::Stage;

/// Directory searched for model files that are not found as given.
pub const MODEL_CACHE_ENV: &str = "EDGEDET_MODEL_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ReferenceCpu,
    Accelerated,
    Mock,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::ReferenceCpu => "reference_cpu",
            BackendKind::Accelerated => "accelerated",
            BackendKind::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub source_path: Option<PathBuf>,
    pub variant_name: String,
    /// Input extents the session runs with, batch first.
    pub input_extents: [usize; 4],
    pub layout: Layout,
    pub category_count: usize,
    pub opset_version: i64,
    pub parameter_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ModelDescriptor {
    /// Square spatial side n.
    pub fn input_size(&self) -> usize {
        match self.layout {
            Layout::ChannelsFirst => self.input_extents[2],
            Layout::ChannelsLast => self.input_extents[1],
        }
    }
}

/// Knobs for turning a model file into a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Required when the graph declares symbolic spatial extents; otherwise
    /// re-specializes the graph to this size.
    pub size: Option<usize>,
    pub layout: Option<Layout>,
    pub category_count: Option<usize>,
    pub variant_name: Option<String>,
}

enum Backend {
    Reference(reference::ReferenceBackend),
    Mock(mock::MockBackend),
}

/// A loaded model. Inference takes `&mut self`: one call in flight per session.
pub struct InferenceSession {
    descriptor: ModelDescriptor,
    backend: Backend,
    clock: SharedClock,
    calls: Arc<AtomicU64>,
}

impl std::fmt::Debug for InferenceSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InferenceSession")
            .field("descriptor", &self.descriptor)
            .field("backend", &self.backend_kind())
            .finish()
    }
}

/// Resolves `path`, falling back to the model cache directory.
pub fn resolve_model_path(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    if let Some(dir) = std::env::var_os(MODEL_CACHE_ENV) {
        let dir = PathBuf::from(dir);
        for candidate in [dir.join(path), dir.join(path).with_extension("onnx")] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::Load { path: path.to_path_buf(), reason: "file not found".into() })
}

/// Loads an ONNX model for the reference CPU backend.
pub fn load_model(path: &Path, options: &LoadOptions, clock: SharedClock) -> Result<InferenceSession> {
    let path = resolve_model_path(path)?;
    let (descriptor, model) = metadata::read_model(&path, options)?;
    for w in &descriptor.warnings {
        log::warn!("{}: {w}", path.display());
    }
    let backend = reference::ReferenceBackend::new(model, &descriptor)?;
    Ok(InferenceSession::with_backend(descriptor, Backend::Reference(backend), clock))
}

/// Opens a mock session.
pub fn mock_session(spec: &MockSpec, clock: SharedClock) -> Result<InferenceSession> {
    spec.validate()?;
    let descriptor = spec.descriptor();
    let backend = mock::MockBackend::new(spec.clone());
    Ok(InferenceSession::with_backend(descriptor, Backend::Mock(backend), clock))
}

impl InferenceSession {
    fn with_backend(descriptor: ModelDescriptor, backend: Backend, clock: SharedClock) -> Self {
        Self { descriptor, backend, clock, calls: Arc::new(AtomicU64::new(0)) }
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn backend_kind(&self) -> BackendKind {
        match self.backend {
            Backend::Reference(_) => BackendKind::ReferenceCpu,
            Backend::Mock(_) => BackendKind::Mock,
        }
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    /// Number of `infer` calls so far, including warm-up.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Shared handle to the call counter.
    pub fn call_counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.calls)
    }

    /// Simulated cost the mock attaches to a non-inference stage; zero for
    /// real backends.
    pub fn injected_delay(&self, stage: Stage) -> Duration {
        match &self.backend {
            Backend::Mock(m) => m.stage_delay(stage),
            Backend::Reference(_) => Duration::ZERO,
        }
    }

    pub fn infer(&mut self, tensor: &InputTensor) -> Result<RawOutput> {
        let d = &self.descriptor;
        if tensor.layout() != d.layout || tensor.size() != d.input_size() || tensor.batch() == 0 {
            return Err(Error::Shape(format!(
                "tensor {:?} ({:?}) does not match model input {:?} ({:?})",
                tensor.dims(),
                tensor.layout(),
                d.input_extents,
                d.layout
            )));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &mut self.backend {
            Backend::Reference(r) => r.infer(tensor, d.category_count),
            Backend::Mock(m) => m.infer(tensor, self.clock.as_ref()),
        }
    }

    /// Runs `iterations` untimed inferences on a zero tensor.
    pub fn warm_up(&mut self, iterations: usize) -> Result<()> {
        if iterations == 0 {
            return Ok(());
        }
        let zeros = InputTensor::zeros(1, self.descriptor.input_size(), self.descriptor.layout);
        for _ in 0..iterations {
            self.infer(&zeros)?;
        }
        Ok(())
    }
}

/// Where sessions come from; lets sweeps reopen a model at each input size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Onnx { path: PathBuf, options: LoadOptions },
    Mock(MockSpec),
    Accelerated { path: PathBuf },
}

impl ModelSource {
    pub fn onnx(path: impl Into<PathBuf>) -> Self {
        ModelSource::Onnx { path: path.into(), options: LoadOptions::default() }
    }

    pub fn variant_name(&self) -> String {
        match self {
            ModelSource::Onnx { path, options } => {
                options.variant_name.clone().unwrap_or_else(|| variant_from_path(path))
            }
            ModelSource::Mock(spec) => spec.variant_name.clone(),
            ModelSource::Accelerated { path } => variant_from_path(path),
        }
    }

    pub fn backend_kind(&self) -> BackendKind {
        match self {
            ModelSource::Onnx { .. } => BackendKind::ReferenceCpu,
            ModelSource::Mock(_) => BackendKind::Mock,
            ModelSource::Accelerated { .. } => BackendKind::Accelerated,
        }
    }

    /// Opens a session, optionally at input size `size`.
    pub fn open(&self, size: Option<usize>, clock: SharedClock) -> Result<InferenceSession> {
        match self {
            ModelSource::Onnx { path, options } => {
                let options = LoadOptions { size: size.or(options.size), ..options.clone() };
                load_model(path, &options, clock)
            }
            ModelSource::Mock(spec) => {
                let spec = MockSpec { input_size: size.unwrap_or(spec.input_size), ..spec.clone() };
                mock_session(&spec, clock)
            }
            ModelSource::Accelerated { .. } => Err(Error::BackendUnavailable(BackendKind::Accelerated.to_string())),
        }
    }

    /// Opens a session on a fresh wall clock.
    pub fn open_wall(&self, size: Option<usize>) -> Result<InferenceSession> {
        self.open(size, clock::wall())
    }
}

fn variant_from_path(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::simulated;
    use crate::decode::Orientation;

    fn canned() -> MockSpec {
        let raw =
            RawOutput::from_candidates(&[vec![10.0, 10.0, 4.0, 4.0, 0.9, 0.1]], 2, Orientation::ChannelsMajor).unwrap();
        MockSpec::canned("mock-n", 32, raw)
    }

    #[test]
    fn mock_returns_canned_output() {
        let spec = canned();
        let mut s = mock_session(&spec, simulated()).unwrap();
        let out = s.infer(&InputTensor::zeros(1, 32, Layout::ChannelsFirst)).unwrap();
        assert_eq!(Some(&out), spec.canned_output().as_ref());
        assert_eq!(s.call_count(), 1);
    }

    #[test]
    fn warm_up_counts_calls() {
        let mut s = mock_session(&canned(), simulated()).unwrap();
        s.warm_up(0).unwrap();
        assert_eq!(s.call_count(), 0);
        s.warm_up(10).unwrap();
        assert_eq!(s.call_count(), 10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = mock_session(&canned(), simulated()).unwrap();
        assert!(matches!(s.infer(&InputTensor::zeros(1, 16, Layout::ChannelsFirst)), Err(Error::Shape(_))));
        assert!(matches!(s.infer(&InputTensor::zeros(1, 32, Layout::ChannelsLast)), Err(Error::Shape(_))));
        assert_eq!(s.call_count(), 0);
    }

    #[test]
    fn mock_wall_time_tracks_delay() {
        let mut spec = canned();
        spec.delays.inference_fixed_ms = 20.0;
        let mut s = mock_session(&spec, clock::wall()).unwrap();
        let t = InputTensor::zeros(1, 32, Layout::ChannelsFirst);
        for _ in 0..3 {
            let start = std::time::Instant::now();
            s.infer(&t).unwrap();
            let ms = start.elapsed().as_secs_f64() * 1e3;
            assert!((20.0..30.0).contains(&ms), "mock call took {ms} ms");
        }
    }

    #[test]
    fn accelerated_is_unavailable() {
        let src = ModelSource::Accelerated { path: "x.onnx".into() };
        assert!(matches!(src.open(None, simulated()), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn missing_file_is_load_error() {
        let r = load_model(Path::new("/nonexistent/model.onnx"), &LoadOptions::default(), simulated());
        assert!(matches!(r, Err(Error::Load { .. })));
    }
}
