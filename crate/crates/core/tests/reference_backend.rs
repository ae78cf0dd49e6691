//! The tract-backed reference backend against the committed tiny models.

use std::path::PathBuf;

use edgedet::clock::wall;
use edgedet::decode::{decode_raw, CoordSpace, DecodeConfig};
use edgedet::engine::{load_model, LoadOptions, ModelSource};
use edgedet::frame::{CameraIntrinsics, CameraPose, PoseBuffer};
use edgedet::geometry::PlacementPolicy;
use edgedet::preprocess::{preprocess, InputTensor};
use edgedet::{AnchorSetup, BackendKind, Error, ImageFrame, Layout, Pipeline};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn noisy_frame(w: usize, h: usize) -> ImageFrame {
    let px = (0..w * h * 3).map(|i| ((i * 2654435761usize) >> 7) as u8).collect();
    ImageFrame::new(0, w, h, px, 0).unwrap()
}

#[test]
fn descriptors_report_layout_and_metadata() {
    let nchw = load_model(&fixture("tiny_yolo_nchw.onnx"), &LoadOptions::default(), wall()).unwrap();
    let d = nchw.descriptor();
    assert_eq!(d.layout, Layout::ChannelsFirst);
    assert_eq!(d.input_extents, [1, 3, 160, 160]);
    assert_eq!(d.category_count, 4);
    assert_eq!(d.opset_version, 13);
    assert_eq!(d.parameter_count, Some(8 * 3 * 16 * 16 + 8 + 8 + 3));
    assert_eq!(d.variant_name, "tiny_yolo_nchw");
    assert_eq!(nchw.backend_kind(), BackendKind::ReferenceCpu);

    let nhwc = load_model(&fixture("tiny_yolo_nhwc.onnx"), &LoadOptions::default(), wall()).unwrap();
    assert_eq!(nhwc.descriptor().layout, Layout::ChannelsLast);
    assert_eq!(nhwc.descriptor().input_extents, [1, 160, 160, 3]);
}

#[test]
fn constant_red_frame_matches_closed_form_scores() {
    let mut session = load_model(&fixture("tiny_yolo_nchw.onnx"), &LoadOptions::default(), wall()).unwrap();
    let frame = ImageFrame::filled(160, 160, [255, 0, 0]).unwrap();
    let (tensor, _) = preprocess(&frame, 160, Layout::ChannelsFirst).unwrap();
    let raw = session.infer(&tensor).unwrap();
    assert_eq!(raw.dims(), [1, 8, 100]);
    let v = raw.values();
    // own channel +8, others -4 each, bias -2; grey class is 8/3 of the channel sum minus 4.8
    let expected = [sigmoid(6.0), sigmoid(-6.0), sigmoid(-6.0), sigmoid(8.0 / 3.0 - 4.8)];
    for (class, want) in expected.iter().enumerate() {
        for i in 0..100 {
            let got = f64::from(v[(4 + class) * 100 + i]);
            assert!((got - want).abs() < 1e-5, "class {class} candidate {i}: {got} vs {want}");
        }
    }
}

#[test]
fn layouts_agree() {
    let frame = noisy_frame(200, 180);
    let mut a = load_model(&fixture("tiny_yolo_nchw.onnx"), &LoadOptions::default(), wall()).unwrap();
    let mut b = load_model(&fixture("tiny_yolo_nhwc.onnx"), &LoadOptions::default(), wall()).unwrap();
    let ra = a.infer(&preprocess(&frame, 160, Layout::ChannelsFirst).unwrap().0).unwrap();
    let rb = b.infer(&preprocess(&frame, 160, Layout::ChannelsLast).unwrap().0).unwrap();
    assert_eq!(ra.dims(), rb.dims());
    for (x, y) in ra.values().iter().zip(rb.values()) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn inference_is_deterministic_and_batch_consistent() {
    let mut s = load_model(&fixture("tiny_yolo_nchw.onnx"), &LoadOptions::default(), wall()).unwrap();
    let (one, _) = preprocess(&noisy_frame(160, 160), 160, Layout::ChannelsFirst).unwrap();
    let first = s.infer(&one).unwrap();
    assert_eq!(s.infer(&one).unwrap(), first);

    let two = InputTensor::stack(&[one.clone(), one]).unwrap();
    let raw = s.infer(&two).unwrap();
    assert_eq!(raw.dims(), [2, 8, 100]);
    let half = raw.values().len() / 2;
    assert_eq!(&raw.values()[..half], &raw.values()[half..]);
    assert_eq!(&raw.values()[..half], first.values());
    assert_eq!(s.call_count(), 3);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let mut s = load_model(&fixture("tiny_yolo_nchw.onnx"), &LoadOptions::default(), wall()).unwrap();
    let err = s.infer(&InputTensor::zeros(1, 96, Layout::ChannelsFirst)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    let err = s.infer(&InputTensor::zeros(1, 160, Layout::ChannelsLast)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn dynamic_model_needs_a_size() {
    let path = fixture("tiny_yolo_dynamic.onnx");
    let err = load_model(&path, &LoadOptions::default(), wall()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    for n in [96, 128, 224] {
        let opts = LoadOptions { size: Some(n), ..Default::default() };
        let mut s = load_model(&path, &opts, wall()).unwrap();
        assert_eq!(s.descriptor().input_size(), n);
        let raw = s.infer(&InputTensor::zeros(1, n, Layout::ChannelsFirst)).unwrap();
        assert_eq!(raw.dims(), [1, 8, (n / 16) * (n / 16)]);
    }
}

#[test]
fn broken_files_fail_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let truncated = dir.path().join("truncated.onnx");
    let bytes = std::fs::read(fixture("tiny_yolo_nchw.onnx")).unwrap();
    std::fs::write(&truncated, &bytes[..bytes.len() / 3]).unwrap();
    assert!(matches!(load_model(&truncated, &LoadOptions::default(), wall()), Err(Error::Load { .. })));

    let garbage = dir.path().join("garbage.onnx");
    std::fs::write(&garbage, b"not a model").unwrap();
    assert!(matches!(load_model(&garbage, &LoadOptions::default(), wall()), Err(Error::Load { .. })));
}

#[test]
fn end_to_end_with_anchoring() {
    let source = ModelSource::onnx(fixture("tiny_yolo_nchw.onnx"));
    let session = source.open_wall(None).unwrap();
    let mut poses = PoseBuffer::with_capacity(4);
    poses.push(CameraPose::identity(0)).unwrap();
    let intrinsics = CameraIntrinsics::perspective(60f64.to_radians(), 320, 240, 0.1, 100.0);
    let setup = AnchorSetup::new(intrinsics, poses, PlacementPolicy::FixedDepth(2.0));

    // a saturated red square inside the center crop
    let mut px = vec![0u8; 320 * 240 * 3];
    for y in 100..140 {
        for x in 140..180 {
            px[(y * 320 + x) * 3] = 255;
        }
    }
    let frame = ImageFrame::new(1, 320, 240, px, 0).unwrap();
    let mut pipeline = Pipeline::new(session, DecodeConfig::default()).unwrap().with_anchoring(setup).unwrap();
    let out = pipeline.run(&frame).unwrap();
    assert!(!out.detections.is_empty());
    assert_eq!(out.anchors.len(), out.detections.len());
    assert!(out.detections.iter().all(|d| d.space == CoordSpace::FullFrame));
    for a in &out.anchors {
        assert!((a.ray.direction.norm() - 1.0).abs() < 1e-9);
        assert!((a.point.unwrap() - a.ray.at(2.0)).norm() < 1e-9);
    }

    let raw_cfg = DecodeConfig { confidence_threshold: 0.9, ..Default::default() };
    let (tensor, _) = preprocess(&frame, 160, Layout::ChannelsFirst).unwrap();
    let raw = pipeline.session_mut().infer(&tensor).unwrap();
    let confident = decode_raw(&raw, &raw_cfg).unwrap();
    assert!(confident.iter().all(|d| d.category == 0));
}
