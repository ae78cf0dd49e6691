//! Writes the tiny detector models under `tests/fixtures/`.
//!
//! Each model maps every 16×16 patch of a 3-channel image to one candidate:
//! `Conv(k16, s16) → Sigmoid → Mul(scale) → Reshape(N, 8, -1)`, giving a
//! `(N, 4 + 4, candidates)` output. Class `c < 3` fires on bright patches of
//! colour channel `c`, class 3 on bright grey; box channels use small seeded
//! weights so geometry depends on content.
//!
//! Run with `cargo run -p edgedet --example make_fixtures`.

use std::path::Path;

use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tract_onnx::pb::tensor_shape_proto::{dimension, Dimension};
use tract_onnx::pb::{
    type_proto, AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, StringStringEntryProto,
    TensorProto, TensorShapeProto, TypeProto, ValueInfoProto,
};

const FLOAT: i32 = 1;
const INT64: i32 = 7;
const ATTR_INTS: i32 = 7;
const PATCH: usize = 16;
const OUT_CHANNELS: usize = 8;
const NAMES: &str = "{0: 'red', 1: 'green', 2: 'blue', 3: 'grey'}";

enum Dim {
    Fixed(i64),
    Param(&'static str),
}

fn value_info(name: &str, dims: &[Dim]) -> ValueInfoProto {
    let dim = dims
        .iter()
        .map(|d| Dimension {
            value: Some(match d {
                Dim::Fixed(v) => dimension::Value::DimValue(*v),
                Dim::Param(p) => dimension::Value::DimParam((*p).into()),
            }),
            ..Default::default()
        })
        .collect();
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: FLOAT,
                shape: Some(TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        input: inputs.iter().map(|s| (*s).into()).collect(),
        output: vec![output.into()],
        name: format!("{op}_{output}"),
        op_type: op.into(),
        attribute,
        ..Default::default()
    }
}

fn ints(name: &str, values: &[i64]) -> AttributeProto {
    AttributeProto { name: name.into(), r#type: ATTR_INTS, ints: values.to_vec(), ..Default::default() }
}

fn floats(name: &str, dims: &[i64], data: Vec<f32>) -> TensorProto {
    TensorProto { name: name.into(), dims: dims.to_vec(), data_type: FLOAT, float_data: data, ..Default::default() }
}

fn int64s(name: &str, data: &[i64]) -> TensorProto {
    TensorProto {
        name: name.into(),
        dims: vec![data.len() as i64],
        data_type: INT64,
        raw_data: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn initializers(input_size: f32) -> Vec<TensorProto> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let area = (PATCH * PATCH) as f32;
    let gain = 8.0;
    let mut weight = vec![0.0f32; OUT_CHANNELS * 3 * PATCH * PATCH];
    let mut bias = vec![0.0f32; OUT_CHANNELS];
    for out in 0..OUT_CHANNELS {
        for c in 0..3 {
            for k in 0..PATCH * PATCH {
                let w = match out {
                    0..=3 => rng.gen_range(-0.02..0.02),
                    4..=6 if c == out - 4 => gain / area,
                    4..=6 => -gain / (2.0 * area),
                    _ => gain / (3.0 * area),
                };
                weight[((out * 3) + c) * PATCH * PATCH + k] = w;
            }
        }
        bias[out] = match out {
            0..=3 => 0.0,
            4..=6 => -gain / 4.0,
            _ => -gain * 0.6,
        };
    }
    let scale = vec![input_size, input_size, 48.0, 48.0, 1.0, 1.0, 1.0, 1.0];
    vec![
        floats("conv.weight", &[OUT_CHANNELS as i64, 3, PATCH as i64, PATCH as i64], weight),
        floats("conv.bias", &[OUT_CHANNELS as i64], bias),
        floats("head.scale", &[1, OUT_CHANNELS as i64, 1, 1], scale),
        int64s("head.shape", &[0, 0, -1]),
    ]
}

fn model(input: ValueInfoProto, channels_last: bool, input_size: f32) -> ModelProto {
    let mut nodes = Vec::new();
    let conv_in = if channels_last {
        nodes.push(node("Transpose", &["images"], "nchw", vec![ints("perm", &[0, 3, 1, 2])]));
        "nchw"
    } else {
        "images"
    };
    let p = PATCH as i64;
    nodes.push(node(
        "Conv",
        &[conv_in, "conv.weight", "conv.bias"],
        "features",
        vec![ints("kernel_shape", &[p, p]), ints("strides", &[p, p])],
    ));
    nodes.push(node("Sigmoid", &["features"], "activated", vec![]));
    nodes.push(node("Mul", &["activated", "head.scale"], "scaled", vec![]));
    nodes.push(node("Reshape", &["scaled", "head.shape"], "output0", vec![]));

    ModelProto {
        ir_version: 8,
        producer_name: "edgedet-fixtures".into(),
        opset_import: vec![OperatorSetIdProto { domain: String::new(), version: 13 }],
        metadata_props: vec![StringStringEntryProto { key: "names".into(), value: NAMES.into() }],
        graph: Some(GraphProto {
            name: "tiny_yolo".into(),
            node: nodes,
            initializer: initializers(input_size),
            input: vec![input],
            output: vec![value_info(
                "output0",
                &[Dim::Param("batch"), Dim::Fixed(OUT_CHANNELS as i64), Dim::Param("candidates")],
            )],
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir)?;
    use Dim::{Fixed, Param};
    let models = [
        (
            "tiny_yolo_nchw.onnx",
            model(value_info("images", &[Param("batch"), Fixed(3), Fixed(160), Fixed(160)]), false, 160.0),
        ),
        (
            "tiny_yolo_nhwc.onnx",
            model(value_info("images", &[Param("batch"), Fixed(160), Fixed(160), Fixed(3)]), true, 160.0),
        ),
        (
            "tiny_yolo_dynamic.onnx",
            model(value_info("images", &[Param("batch"), Fixed(3), Param("height"), Param("width")]), false, 160.0),
        ),
    ];
    for (name, proto) in models {
        let path = dir.join(name);
        std::fs::write(&path, proto.encode_to_vec())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
