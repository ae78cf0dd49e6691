use std::collections::HashMap;
use std::sync::Arc;

use tract_onnx::prelude::*;

use super::ModelDescriptor;
use crate::decode::RawOutput;
use crate::error::{Error, Result};
use crate::preprocess::InputTensor;

type Plan = Arc<TypedRunnableModel>;

/// CPU execution of the ONNX graph. Plans are specialized per concrete input
/// shape, so a batch of tiles gets its own plan on first use.
pub(super) struct ReferenceBackend {
    model: InferenceModel,
    plans: HashMap<[usize; 4], Plan>,
}

fn inference_err(e: impl std::fmt::Display) -> Error {
    Error::Inference { backend: "reference_cpu".into(), reason: e.to_string() }
}

impl ReferenceBackend {
    pub(super) fn new(model: InferenceModel, descriptor: &ModelDescriptor) -> Result<Self> {
        let mut backend = Self { model, plans: HashMap::new() };
        backend.plan(descriptor.input_extents).map_err(|e| match e {
            Error::Inference { reason, .. } => {
                Error::Load { path: descriptor.source_path.clone().unwrap_or_default(), reason }
            }
            other => other,
        })?;
        Ok(backend)
    }

    fn plan(&mut self, dims: [usize; 4]) -> Result<Plan> {
        if let Some(p) = self.plans.get(&dims) {
            return Ok(Arc::clone(p));
        }
        let plan = self
            .model
            .clone()
            .with_input_fact(0, f32::fact(dims).into())
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| inference_err(format!("{e:#}")))?;
        self.plans.insert(dims, Arc::clone(&plan));
        Ok(plan)
    }

    pub(super) fn infer(&mut self, tensor: &InputTensor, category_count: usize) -> Result<RawOutput> {
        let dims = tensor.dims();
        let plan = self.plan(dims)?;
        let input = Tensor::from_shape(&dims, tensor.values()).map_err(inference_err)?;
        let outputs = plan.run(tvec!(input.into())).map_err(|e| inference_err(format!("{e:#}")))?;
        let out = outputs.first().ok_or_else(|| inference_err("model produced no output"))?;
        let view = out.to_plain_array_view::<f32>().map_err(inference_err)?;
        let shape = view.shape();
        if shape.len() != 3 {
            return Err(inference_err(format!("expected a rank-3 output, got shape {shape:?}")));
        }
        let out_dims = [shape[0], shape[1], shape[2]];
        RawOutput::new(out_dims, view.iter().copied().collect(), category_count)
    }
}
