use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;

use rtgrasp_core::geometry::{
    angle_difference, pose_to_rect, rect_iou, rect_to_pose, rectangle_metric, wrap_angle, GraspPose, GraspRectangle,
    MetricThresholds, Point,
};
use rtgrasp_core::parser::parse_pose;
use rtgrasp_core::templates::{quantize_pose, render_pose_text};

fn rect(cx: f64, cy: f64, theta: f64, w: f64, plate: f64) -> GraspRectangle {
    let p = GraspPose {
        x: cx / 1000.0,
        y: cy / 1000.0,
        theta: wrap_angle(theta),
    };
    pose_to_rect(&p, w, plate, 1000.0, 1000.0).unwrap()
}

fn arb_rect() -> impl Strategy<Value = GraspRectangle> {
    (300.0..700.0f64, 300.0..700.0f64, -PI..PI, 5.0..200.0f64, 5.0..200.0f64)
        .prop_map(|(x, y, t, w, h)| rect(x, y, t, w, h))
}

fn arb_pose() -> impl Strategy<Value = GraspPose> {
    (0.0..=1.0f64, 0.0..=1.0f64, -FRAC_PI_2..FRAC_PI_2).prop_map(|(x, y, theta)| GraspPose { x, y, theta })
}

fn rigid(r: &GraspRectangle, angle: f64, dx: f64, dy: f64) -> GraspRectangle {
    let (s, c) = angle.sin_cos();
    r.map_vertices(|p| Point::new(c * p.x - s * p.y + dx, s * p.x + c * p.y + dy))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_rect(), b in arb_rect()) {
        let (ab, ba) = (rect_iou(&a, &b), rect_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert_eq!(rect_iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_is_invariant_under_rigid_motion(a in arb_rect(), b in arb_rect(), t in -PI..PI, dx in -200.0..200.0f64, dy in -200.0..200.0f64) {
        let before = rect_iou(&a, &b);
        let after = rect_iou(&rigid(&a, t, dx, dy), &rigid(&b, t, dx, dy));
        prop_assert!((before - after).abs() < 1e-9, "{} vs {}", before, after);
    }

    #[test]
    fn angle_difference_is_a_pseudometric(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64) {
        let d = angle_difference;
        prop_assert!((0.0..=FRAC_PI_2 + 1e-12).contains(&d(a, b)));
        prop_assert!((d(a, b) - d(b, a)).abs() < 1e-12);
        prop_assert!(d(a, a) < 1e-12);
        prop_assert!(d(a, a + PI) < 1e-9);
        prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-9);
    }

    #[test]
    fn metric_is_monotone_in_thresholds(p in arb_pose(), gt in arb_rect(), lo in 0.05..0.5f64, hi_extra in 0.0..0.4f64, a_lo in 5.0..45.0f64, a_extra in 0.0..40.0f64) {
        let strict = MetricThresholds::new(lo + hi_extra, a_lo).unwrap();
        let loose = MetricThresholds::new(lo, a_lo + a_extra).unwrap();
        let s = rectangle_metric(&p, &[gt], &strict, 1000.0, 1000.0).unwrap();
        let l = rectangle_metric(&p, &[gt], &loose, 1000.0, 1000.0).unwrap();
        prop_assert!(!s.success || l.success);
    }

    #[test]
    fn adding_ground_truths_never_hurts(p in arb_pose(), a in arb_rect(), b in arb_rect()) {
        let th = MetricThresholds::default();
        let one = rectangle_metric(&p, &[a], &th, 1000.0, 1000.0).unwrap();
        let two = rectangle_metric(&p, &[a, b], &th, 1000.0, 1000.0).unwrap();
        prop_assert!(!one.success || two.success);
    }

    #[test]
    fn pose_rect_round_trip(p in arb_pose(), w in 1.0..400.0f64, h in 1.0..400.0f64) {
        let r = pose_to_rect(&p, w, h, 640.0, 480.0).unwrap();
        let q = rect_to_pose(&r, 640.0, 480.0).unwrap();
        prop_assert!((q.x - p.x).abs() < 1e-9 && (q.y - p.y).abs() < 1e-9);
        prop_assert!(angle_difference(q.theta, p.theta) < 1e-9);
        prop_assert!((r.w() - w).abs() < 1e-9 && (r.plate_len() - h).abs() < 1e-9);
    }

    #[test]
    fn pose_text_round_trips(p in arb_pose()) {
        let q = quantize_pose(&p);
        prop_assert_eq!(quantize_pose(&q), q);
        let text = render_pose_text(&q);
        prop_assert_eq!(parse_pose(&text).pose, Some(q));
    }

    #[test]
    fn parser_is_total(s in any::<String>()) {
        let out = parse_pose(&s);
        if let Some(p) = out.pose {
            prop_assert!(p.is_valid());
            let (a, b) = out.matched_span.unwrap();
            prop_assert!(a < b && b <= s.chars().count());
        } else {
            prop_assert!(!out.diagnostics.is_empty());
        }
    }

    #[test]
    fn trailing_prose_does_not_change_the_pose(p in arb_pose(), tail in "[a-zA-Z ,.!]{0,40}") {
        let text = format!("Reasoning first. {}", render_pose_text(&quantize_pose(&p)));
        let base = parse_pose(&text).pose;
        prop_assert_eq!(parse_pose(&format!("{text}{tail}")).pose, base);
    }
}
