//! Property tests for evaluation and geometry invariants.

use edgedet::decode::BBox;
use edgedet::evalmap::{evaluate, match_detections, recall_by_group, EvalConfig, GroundTruthItem};
use edgedet::frame::{CameraIntrinsics, CameraPose};
use edgedet::geometry::{project, to_world, unproject};
use edgedet::DetectionRecord;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0..90.0, 0.0..90.0, 2.0..40.0, 2.0..40.0).prop_map(|(x, y, w, h)| [x, y, w, h])
}

fn arb_gts() -> impl Strategy<Value = Vec<GroundTruthItem>> {
    prop::collection::vec((1u64..4, arb_box(), 0u64..3, prop::bool::ANY), 0..15).prop_map(|v| {
        v.into_iter()
            .map(|(image_id, b, category_id, near)| GroundTruthItem {
                image_id,
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
                category_id,
                group_tag: Some(if near { "near" } else { "far" }.into()),
            })
            .collect()
    })
}

/// Detections drawn partly as jittered copies of the ground truth.
fn arb_case() -> impl Strategy<Value = (Vec<GroundTruthItem>, Vec<DetectionRecord>)> {
    arb_gts().prop_flat_map(|gts| {
        let n = gts.len();
        let dets = prop::collection::vec(
            (0..n.max(1), arb_box(), 0u64..3, 1u64..4, -3.0..3.0, 0.0..1.0, prop::bool::ANY),
            0..20,
        );
        (Just(gts), dets).prop_map(|(gts, raw)| {
            let dets = raw
                .into_iter()
                .map(|(g, b, category_id, image_id, jitter, score, copy)| match gts.get(g).filter(|_| copy) {
                    Some(t) => DetectionRecord {
                        image_id: t.image_id,
                        category_id: t.category_id,
                        bbox: [t.bbox.x + jitter, t.bbox.y, t.bbox.w, t.bbox.h - jitter / 2.0],
                        score,
                        anchor: None,
                    },
                    None => DetectionRecord { image_id, category_id, bbox: b, score, anchor: None },
                })
                .collect();
            (gts, dets)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ap_bounded_and_strict_thresholds_never_score_higher((gts, dets) in arb_case()) {
        let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.map50));
        prop_assert!((0.0..=1.0).contains(&r.map50_95));
        prop_assert!(r.map50_95 <= r.map50 + 1e-12);
        for c in &r.per_category {
            prop_assert!((0.0..=1.0).contains(&c.ap50) && c.ap50_95 <= c.ap50 + 1e-12);
        }
    }

    #[test]
    fn evaluation_ignores_input_order((gts, dets) in arb_case()) {
        let a = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        let mut rdets = dets.clone();
        rdets.reverse();
        let mut rgts = gts.clone();
        rgts.reverse();
        let b = evaluate(&rdets, &rgts, &EvalConfig::default()).unwrap();
        prop_assert!((a.map50 - b.map50).abs() < 1e-12);
        prop_assert!((a.map50_95 - b.map50_95).abs() < 1e-12);
    }

    #[test]
    fn duplicates_of_one_truth_give_one_tp(b in arb_box(), copies in 1usize..12, scores in prop::collection::vec(0.0..1.0f64, 12)) {
        let gt = GroundTruthItem { image_id: 1, bbox: BBox::new(b[0], b[1], b[2], b[3]), category_id: 0, group_tag: None };
        let dets: Vec<DetectionRecord> = (0..copies)
            .map(|i| DetectionRecord { image_id: 1, category_id: 0, bbox: b, score: scores[i], anchor: None })
            .collect();
        let m = match_detections(&dets, &[gt], 0.5);
        prop_assert_eq!(m.detection_tp.iter().filter(|&&t| t).count(), 1);
    }

    #[test]
    fn group_recall_falls_with_score_threshold((gts, dets) in arb_case(), lo in 0.0..1.0f64, step in 0.0..0.5f64) {
        let loose = recall_by_group(&dets, &gts, 0.5, lo);
        let strict = recall_by_group(&dets, &gts, 0.5, lo + step);
        for (group, r) in &strict {
            prop_assert!(r.recall <= loose[group].recall + 1e-12, "{}", group);
        }
    }

    #[test]
    fn unproject_then_project_returns_the_pixel(
        fov in 15.0..140.0f64, w in 32usize..4096, h in 32usize..4096,
        fu in 0.0..1.0f64, fv in 0.0..1.0f64, depth in 0.1..500.0f64,
    ) {
        let k = CameraIntrinsics::perspective(fov.to_radians(), w, h, 0.05, 1000.0);
        let px = (fu * (w as f64 - 1.0), fv * (h as f64 - 1.0));
        let dir = unproject(px, &k).unwrap();
        prop_assert!((dir.norm() - 1.0).abs() < 1e-12);
        prop_assert!(dir.z < 0.0);
        let back = project(&(dir * depth), &k).unwrap();
        prop_assert!((back.0 - px.0).abs() < 1e-6 && (back.1 - px.1).abs() < 1e-6);
    }

    #[test]
    fn world_rays_stay_unit_and_start_at_the_camera(
        axis in (-1.0..1.0f64, -1.0..1.0f64, 0.1..1.0f64), angle in -3.1..3.1f64, t in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
    ) {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::new(axis.0, axis.1, axis.2)), angle);
        let pose = CameraPose::from_parts(rot, Vector3::new(t.0, t.1, t.2), 0);
        let ray = to_world(&-Vector3::z(), &pose);
        prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        prop_assert!((ray.origin - Vector3::new(t.0, t.1, t.2)).norm() < 1e-12);
        prop_assert!((ray.direction - rot * -Vector3::z()).norm() < 1e-12);
    }
}
