//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The plain functions are usable (and tested) natively; the
//! `#[wasm_bindgen]` wrappers only convert errors for JavaScript.

use wasm_bindgen::prelude::*;

use rtgrasp_core::geometry::{pose_to_rect, rectangle_metric, GraspPose, GraspRectangle, MetricThresholds, Point};
use rtgrasp_core::parser::parse_pose;

/// Corners of the rectangle drawn for a pose, flattened as
/// `[x0, y0, x1, y1, x2, y2, x3, y3]` in image pixels.
pub fn rect_corners(
    x: f64,
    y: f64,
    theta: f64,
    w: f64,
    plate_len: f64,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<f64>, String> {
    let pose = GraspPose::new(x, y, theta).map_err(|e| e.to_string())?;
    let r = pose_to_rect(&pose, w, plate_len, img_w, img_h).map_err(|e| e.to_string())?;
    Ok(r.vertices().iter().flat_map(|v| [v.x, v.y]).collect())
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub success: bool,
    pub iou: f64,
    pub angle_diff_deg: f64,
}

/// Scores a pose against one ground-truth rectangle given as 8 numbers.
pub fn score_pose(
    pose: [f64; 3],
    gt: &[f64],
    img_w: f64,
    img_h: f64,
    min_iou: f64,
    max_angle_deg: f64,
) -> Result<Score, String> {
    let [a, b, c, d]: [Point; 4] = match gt {
        [x0, y0, x1, y1, x2, y2, x3, y3] => [
            Point::new(*x0, *y0),
            Point::new(*x1, *y1),
            Point::new(*x2, *y2),
            Point::new(*x3, *y3),
        ],
        _ => return Err(format!("expected 8 coordinates, got {}", gt.len())),
    };
    let gt = GraspRectangle::from_vertices([a, b, c, d]).map_err(|e| e.to_string())?;
    let pose = GraspPose::new(pose[0], pose[1], pose[2]).map_err(|e| e.to_string())?;
    let th = MetricThresholds::new(min_iou, max_angle_deg).map_err(|e| e.to_string())?;
    let out = rectangle_metric(&pose, &[gt], &th, img_w, img_h).map_err(|e| e.to_string())?;
    Ok(Score {
        success: out.success,
        iou: out.best_iou,
        angle_diff_deg: out.best_angle_diff_deg,
    })
}

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub found: bool,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// Character offsets of the matched pose, or -1.
    pub start: i32,
    pub end: i32,
    reasoning: String,
    diagnostics: String,
}

#[wasm_bindgen]
impl Parsed {
    #[wasm_bindgen(getter)]
    pub fn reasoning(&self) -> String {
        self.reasoning.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn diagnostics(&self) -> String {
        self.diagnostics.clone()
    }
}

pub fn parse_text(text: &str) -> Parsed {
    let out = parse_pose(text);
    let (start, end) = out.matched_span.map_or((-1, -1), |(a, b)| (a as i32, b as i32));
    let (x, y, theta) = out.pose.map_or((0.0, 0.0, 0.0), |p| (p.x, p.y, p.theta));
    Parsed {
        found: out.pose.is_some(),
        x,
        y,
        theta,
        start,
        end,
        reasoning: out.reasoning_text,
        diagnostics: out.diagnostics.join("\n"),
    }
}

#[wasm_bindgen(js_name = poseToRect)]
pub fn pose_to_rect_js(
    x: f64,
    y: f64,
    theta: f64,
    w: f64,
    plate_len: f64,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<f64>, JsError> {
    rect_corners(x, y, theta, w, plate_len, img_w, img_h).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scoreGrasp)]
#[allow(clippy::too_many_arguments)]
pub fn score_grasp_js(
    x: f64,
    y: f64,
    theta: f64,
    gt: &[f64],
    img_w: f64,
    img_h: f64,
    min_iou: f64,
    max_angle_deg: f64,
) -> Result<Score, JsError> {
    score_pose([x, y, theta], gt, img_w, img_h, min_iou, max_angle_deg).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = parsePose)]
pub fn parse_pose_js(text: &str) -> Parsed {
    parse_text(text)
}
