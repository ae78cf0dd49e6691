use std::path::Path;

use tract_onnx::pb::{self, tensor_shape_proto::dimension, type_proto};
use tract_onnx::prelude::*;

use super::{LoadOptions, ModelDescriptor};
use crate::error::{Error, Result};
use crate::preprocess::Layout;

/// Highest default-domain opset the reference backend is exercised against.
pub const REFERENCE_MAX_OPSET: i64 = 18;

/// Channel-axis rule: extent[1] == 3 means channels-first, extent[3] == 3
/// channels-last. Unknown extents are passed as 0.
pub fn detect_layout(extents: &[usize]) -> Result<Layout> {
    if extents.len() != 4 {
        return Err(Error::UnsupportedInput(extents.iter().map(|&e| e as i64).collect()));
    }
    match (extents[1] == 3, extents[3] == 3) {
        (true, true) => Err(Error::AmbiguousLayout(extents.to_vec())),
        (true, false) => Ok(Layout::ChannelsFirst),
        (false, true) => Ok(Layout::ChannelsLast),
        (false, false) => Err(Error::UnsupportedInput(extents.iter().map(|&e| e as i64).collect())),
    }
}

fn load_err(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Extents of a value; `None` for symbolic or missing dims.
fn extents(info: &pb::ValueInfoProto) -> Option<Vec<Option<usize>>> {
    let Some(type_proto::Value::TensorType(t)) = info.r#type.as_ref()?.value.as_ref() else {
        return None;
    };
    Some(
        t.shape
            .as_ref()?
            .dim
            .iter()
            .map(|d| match d.value {
                Some(dimension::Value::DimValue(v)) if v > 0 => Some(v as usize),
                _ => None,
            })
            .collect(),
    )
}

/// Counts entries of an exported class-name dict such as `{0: 'person', 1: 'car'}`.
fn count_names(names: &str) -> usize {
    let bytes = names.as_bytes();
    let mut count = 0;
    let mut depth_quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match depth_quote {
            Some(q) if b == q => depth_quote = None,
            Some(_) => {}
            None if b == b'\'' || b == b'"' => depth_quote = Some(b),
            None if b == b':' => count += 1,
            None => {}
        }
        i += 1;
    }
    count
}

pub(super) fn read_model(path: &Path, options: &LoadOptions) -> Result<(ModelDescriptor, InferenceModel)> {
    let onnx = tract_onnx::onnx();
    let proto = onnx.proto_model_for_path(path).map_err(|e| load_err(path, format!("{e:#}")))?;
    let graph = proto.graph.as_ref().ok_or_else(|| load_err(path, "model has no graph"))?;
    if graph.node.is_empty() {
        return Err(load_err(path, "graph has no nodes"));
    }
    let initializers: Vec<&str> = graph.initializer.iter().map(|t| t.name.as_str()).collect();
    let input = graph
        .input
        .iter()
        .find(|i| !initializers.contains(&i.name.as_str()))
        .ok_or_else(|| load_err(path, "graph declares no input"))?;
    let dims = extents(input).ok_or_else(|| load_err(path, "input is not a shaped tensor"))?;
    if dims.len() != 4 {
        return Err(Error::UnsupportedInput(dims.iter().map(|d| d.map_or(-1, |v| v as i64)).collect()));
    }

    let concrete: Vec<usize> = dims.iter().map(|d| d.unwrap_or(0)).collect();
    let layout = match options.layout {
        Some(l) => l,
        None => detect_layout(&concrete)?,
    };
    let (h_axis, w_axis) = match layout {
        Layout::ChannelsFirst => (2, 3),
        Layout::ChannelsLast => (1, 2),
    };
    let size = match (options.size, dims[h_axis], dims[w_axis]) {
        (Some(n), _, _) => n,
        (None, Some(h), Some(w)) if h == w => h,
        (None, Some(h), Some(w)) => {
            return Err(Error::Config(format!("model input {h}x{w} is not square")));
        }
        _ => {
            return Err(Error::Config(format!(
                "model input {:?} has symbolic spatial extents; pass an explicit input size",
                concrete
            )))
        }
    };
    if size == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    let input_extents = match layout {
        Layout::ChannelsFirst => [1, 3, size, size],
        Layout::ChannelsLast => [1, size, size, 3],
    };

    let opset_version = proto
        .opset_import
        .iter()
        .find(|o| o.domain.is_empty() || o.domain == "ai.onnx")
        .map(|o| o.version)
        .unwrap_or(0);
    let mut warnings = Vec::new();
    if opset_version > REFERENCE_MAX_OPSET {
        warnings.push(format!(
            "opset {opset_version} exceeds {REFERENCE_MAX_OPSET}, the newest opset the reference backend is validated for"
        ));
    }

    let from_names =
        proto.metadata_props.iter().find(|p| p.key == "names").map(|p| count_names(&p.value)).filter(|&c| c > 0);
    let from_output = graph
        .output
        .first()
        .and_then(extents)
        .filter(|d| d.len() == 3)
        .and_then(|d| d[1])
        .filter(|&c| c > 4)
        .map(|c| c - 4);
    let category_count = options
        .category_count
        .or(from_names)
        .or(from_output)
        .ok_or_else(|| Error::Config("cannot infer the category count; pass it explicitly".into()))?;

    let parameter_count = graph.initializer.iter().map(|t| t.dims.iter().product::<i64>().max(0) as u64).sum::<u64>();

    let variant_name = options.variant_name.clone().unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });

    let model = onnx.model_for_proto_model(&proto).map_err(|e| load_err(path, format!("{e:#}")))?;
    let descriptor = ModelDescriptor {
        source_path: Some(path.to_path_buf()),
        variant_name,
        input_extents,
        layout,
        category_count,
        opset_version,
        parameter_count: Some(parameter_count),
        warnings,
    };
    Ok((descriptor, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_rules() {
        assert_eq!(detect_layout(&[1, 3, 224, 224]).unwrap(), Layout::ChannelsFirst);
        assert_eq!(detect_layout(&[1, 224, 224, 3]).unwrap(), Layout::ChannelsLast);
        assert!(matches!(detect_layout(&[1, 3, 3, 3]), Err(Error::AmbiguousLayout(_))));
        assert!(matches!(detect_layout(&[1, 4, 224, 224]), Err(Error::UnsupportedInput(_))));
        assert!(matches!(detect_layout(&[1, 3, 224]), Err(Error::UnsupportedInput(_))));
    }

    #[test]
    fn names_are_counted() {
        assert_eq!(count_names("{0: 'person', 1: 'bicycle', 2: 'car'}"), 3);
        assert_eq!(count_names("{0: 'a: b', 1: \"c\"}"), 2);
        assert_eq!(count_names(""), 0);
    }
}
