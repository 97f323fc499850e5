//! Planar grasp geometry: normalized poses, oriented grasp rectangles,
//! rotated-rectangle IoU and the Cornell rectangle metric.
//!
//! Pixel coordinates follow image convention (x right, y down). The grasp
//! angle is the direction of the gripper closing axis measured with
//! `atan2(dy, dx)` in pixel space and is kept in the half-open interval
//! `[-π/2, π/2)`, since an antipodal grasp is symmetric under a π turn.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("degenerate rectangle: {0}")]
    Degenerate(String),
    #[error("non-positive dimension: {what} = {value}")]
    Dimension { what: &'static str, value: f64 },
    #[error("vertices do not form a rectangle: {0}")]
    NotRectangle(String),
    #[error("no ground-truth rectangles to compare against")]
    EmptyGroundTruth,
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }
}

/// Wraps an angle into `[-π/2, π/2)` with period π.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    // floor() can leave us one ulp outside the interval
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    // the subtraction above can land exactly on +π/2 again for inputs just
    // below -π/2; canonicalize
    if t >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        t
    }
}

/// Smallest difference between two grasp angles modulo π, in `[0, π/2]`.
pub fn angle_difference(t1: f64, t2: f64) -> f64 {
    let d = (t1 - t2).rem_euclid(PI);
    d.min(PI - d).abs()
}

/// A grasp pose with its center normalized by the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl GraspPose {
    /// Builds a pose, rejecting out-of-range centers and wrapping the angle.
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self, GeometryError> {
        check_range("x", x, 0.0, 1.0)?;
        check_range("y", y, 0.0, 1.0)?;
        if !theta.is_finite() {
            return Err(GeometryError::OutOfRange {
                what: "theta",
                value: theta,
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY,
            });
        }
        Ok(Self {
            x,
            y,
            theta: wrap_angle(theta),
        })
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.x)
            && (0.0..=1.0).contains(&self.y)
            && (-FRAC_PI_2..FRAC_PI_2).contains(&self.theta)
    }
}

fn check_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), GeometryError> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(GeometryError::OutOfRange { what, value, lo, hi })
    }
}

fn check_image(img_w: f64, img_h: f64) -> Result<(), GeometryError> {
    for (what, v) in [("img_w", img_w), ("img_h", img_h)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(GeometryError::Dimension { what, value: v });
        }
    }
    Ok(())
}

pub fn normalize_pose(
    px: f64,
    py: f64,
    theta: f64,
    img_w: f64,
    img_h: f64,
) -> Result<GraspPose, GeometryError> {
    check_image(img_w, img_h)?;
    check_range("px", px, 0.0, img_w)?;
    check_range("py", py, 0.0, img_h)?;
    GraspPose::new(px / img_w, py / img_h, theta)
}

/// Inverse of [`normalize_pose`]: returns `(px, py, theta)`.
pub fn denormalize_pose(p: &GraspPose, img_w: f64, img_h: f64) -> (f64, f64, f64) {
    (p.x * img_w, p.y * img_h, p.theta)
}

/// An oriented grasp rectangle in pixel coordinates.
///
/// Edges `v0v1` and `v2v3` are the jaw plates; `v1v2` spans the gripper
/// opening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRectangle {
    vertices: [Point; 4],
}

/// Relative tolerance on opposite edge lengths for a validated rectangle.
pub const EDGE_REL_TOL: f64 = 1e-6;
/// Tolerance (radians) on the right angles of a validated rectangle.
pub const RIGHT_ANGLE_TOL: f64 = 1e-3;

impl GraspRectangle {
    /// Validates that the four vertices form a non-degenerate rectangle.
    pub fn from_vertices(vertices: [Point; 4]) -> Result<Self, GeometryError> {
        check_rectangle(&vertices, EDGE_REL_TOL, RIGHT_ANGLE_TOL)?;
        Ok(Self { vertices })
    }

    /// Skips validation. Rectangle operations stay total on such input
    /// (degenerate shapes score IoU 0).
    pub fn from_vertices_unchecked(vertices: [Point; 4]) -> Self {
        Self { vertices }
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn center(&self) -> Point {
        let v = &self.vertices;
        Point::new(
            0.25 * (v[0].x + v[1].x + v[2].x + v[3].x),
            0.25 * (v[0].y + v[1].y + v[2].y + v[3].y),
        )
    }

    /// Gripper opening, `|v1 - v2|`.
    pub fn w(&self) -> f64 {
        self.vertices[1].dist(self.vertices[2])
    }

    /// Jaw plate length, `|v0 - v1|`.
    pub fn plate_len(&self) -> f64 {
        self.vertices[0].dist(self.vertices[1])
    }

    /// Closing-axis angle, wrapped to `[-π/2, π/2)`.
    pub fn theta(&self) -> f64 {
        let v = &self.vertices;
        let a = v[0].midpoint(v[1]);
        let b = v[2].midpoint(v[3]);
        wrap_angle((b.y - a.y).atan2(b.x - a.x))
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices).abs()
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            vertices: self.vertices.map(f),
        }
    }
}

/// Checks rectangle shape with the given tolerances.
pub fn check_rectangle(v: &[Point; 4], edge_rel_tol: f64, angle_tol: f64) -> Result<(), GeometryError> {
    if v.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::Degenerate("non-finite vertex".into()));
    }
    let edges: Vec<(f64, f64)> = (0..4)
        .map(|i| {
            let a = v[i];
            let b = v[(i + 1) % 4];
            (b.x - a.x, b.y - a.y)
        })
        .collect();
    let lens: Vec<f64> = edges.iter().map(|(dx, dy)| dx.hypot(*dy)).collect();
    let scale = lens.iter().cloned().fold(0.0, f64::max);
    if let Some(i) = lens.iter().position(|&l| l <= 1e-12 * scale.max(1.0)) {
        return Err(GeometryError::Degenerate(format!("edge {i} has zero length")));
    }
    for i in 0..2 {
        let (a, b) = (lens[i], lens[i + 2]);
        if (a - b).abs() > edge_rel_tol * a.max(b) {
            return Err(GeometryError::NotRectangle(format!(
                "opposite edges {i} and {} differ: {a} vs {b}",
                i + 2
            )));
        }
    }
    for i in 0..4 {
        let (ax, ay) = edges[i];
        let (bx, by) = edges[(i + 1) % 4];
        let cos = (ax * bx + ay * by) / (lens[i] * lens[(i + 1) % 4]);
        let off = FRAC_PI_2 - cos.clamp(-1.0, 1.0).acos();
        if off.abs() > angle_tol {
            return Err(GeometryError::NotRectangle(format!(
                "corner {} is {:.4} rad away from a right angle",
                (i + 1) % 4,
                off
            )));
        }
    }
    Ok(())
}

pub fn rect_to_pose(r: &GraspRectangle, img_w: f64, img_h: f64) -> Result<GraspPose, GeometryError> {
    check_image(img_w, img_h)?;
    if r.w() <= 0.0 || r.plate_len() <= 0.0 {
        return Err(GeometryError::Degenerate("zero-length edge".into()));
    }
    let c = r.center();
    Ok(GraspPose {
        x: c.x / img_w,
        y: c.y / img_h,
        theta: r.theta(),
    })
}

/// Rectangle centered at `p` with closing axis at `p.theta`, opening `w`
/// and plate length `plate_len` (both in pixels).
pub fn pose_to_rect(
    p: &GraspPose,
    w: f64,
    plate_len: f64,
    img_w: f64,
    img_h: f64,
) -> Result<GraspRectangle, GeometryError> {
    check_image(img_w, img_h)?;
    for (what, v) in [("w", w), ("plate_len", plate_len)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(GeometryError::Dimension { what, value: v });
        }
    }
    let (cx, cy, theta) = denormalize_pose(p, img_w, img_h);
    Ok(rect_from_center(Point::new(cx, cy), theta, w, plate_len))
}

/// Pixel-space rectangle builder shared by pose conversion and ingestion.
pub(crate) fn rect_from_center(c: Point, theta: f64, w: f64, plate_len: f64) -> GraspRectangle {
    let (s, co) = theta.sin_cos();
    // closing axis and plate direction
    let (ux, uy) = (co * 0.5 * w, s * 0.5 * w);
    let (nx, ny) = (-s * 0.5 * plate_len, co * 0.5 * plate_len);
    GraspRectangle {
        vertices: [
            Point::new(c.x - ux - nx, c.y - uy - ny),
            Point::new(c.x - ux + nx, c.y - uy + ny),
            Point::new(c.x + ux + nx, c.y + uy + ny),
            Point::new(c.x + ux - nx, c.y + uy - ny),
        ],
    }
}

/// Signed shoelace area (positive for counter-clockwise in x-right/y-up).
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

/// Intersection of a convex `subject` with a convex counter-clockwise
/// `clip` polygon (Sutherland-Hodgman).
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: Point| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// IoU together with a flag telling whether an input was degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouResult {
    pub iou: f64,
    pub degenerate: bool,
}

pub fn rect_iou_checked(a: &GraspRectangle, b: &GraspRectangle) -> IouResult {
    let pa = ccw(a.vertices());
    let pb = ccw(b.vertices());
    let (area_a, area_b) = (polygon_area(&pa), polygon_area(&pb));
    let finite = a.vertices().iter().chain(b.vertices()).all(|p| p.x.is_finite() && p.y.is_finite());
    if !finite || !(area_a > 0.0) || !(area_b > 0.0) {
        return IouResult { iou: 0.0, degenerate: true };
    }
    if a == b {
        return IouResult { iou: 1.0, degenerate: false };
    }
    let inter = polygon_area(&clip_convex(&pa, &pb)).abs();
    let union = area_a + area_b - inter;
    let iou = if union > 0.0 { (inter / union).clamp(0.0, 1.0) } else { 0.0 };
    IouResult { iou, degenerate: false }
}

/// Intersection over union of two oriented rectangles, in `[0, 1]`.
pub fn rect_iou(a: &GraspRectangle, b: &GraspRectangle) -> f64 {
    rect_iou_checked(a, b).iou
}

fn ccw(v: &[Point; 4]) -> Vec<Point> {
    let mut poly = v.to_vec();
    if polygon_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Rectangle-metric thresholds; both comparisons are strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricThresholds {
    pub min_iou: f64,
    pub max_angle_deg: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            min_iou: 0.25,
            max_angle_deg: 30.0,
        }
    }
}

impl MetricThresholds {
    pub fn new(min_iou: f64, max_angle_deg: f64) -> Result<Self, GeometryError> {
        let th = Self { min_iou, max_angle_deg };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.min_iou > 0.0 && self.min_iou < 1.0) {
            return Err(GeometryError::InvalidThresholds(format!(
                "min_iou must be in (0, 1), got {}",
                self.min_iou
            )));
        }
        if !(self.max_angle_deg > 0.0 && self.max_angle_deg <= 90.0) {
            return Err(GeometryError::InvalidThresholds(format!(
                "max_angle_deg must be in (0, 90], got {}",
                self.max_angle_deg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspEvalOutcome {
    pub success: bool,
    pub best_iou: f64,
    pub best_angle_diff_deg: f64,
    pub matched_gt_index: Option<usize>,
}

/// Scores a predicted pose against every ground-truth rectangle.
///
/// The prediction is turned into a rectangle using each ground truth's own
/// opening and plate length. It succeeds if any ground truth has IoU
/// strictly above `min_iou` and angle difference strictly below
/// `max_angle_deg`. The reported match is the highest-IoU ground truth among
/// those passing the angle test, or the highest-IoU one overall.
pub fn rectangle_metric(
    pred: &GraspPose,
    gts: &[GraspRectangle],
    th: &MetricThresholds,
    img_w: f64,
    img_h: f64,
) -> Result<GraspEvalOutcome, GeometryError> {
    if gts.is_empty() {
        return Err(GeometryError::EmptyGroundTruth);
    }
    th.validate()?;
    let max_angle = th.max_angle_deg.to_radians();

    let mut best_angle_ok: Option<(usize, f64, f64)> = None;
    let mut best_any: Option<(usize, f64, f64)> = None;
    let mut success = false;
    for (i, gt) in gts.iter().enumerate() {
        let (w, plate) = (gt.w(), gt.plate_len());
        let iou = if w > 0.0 && plate > 0.0 {
            rect_iou(&pose_to_rect(pred, w, plate, img_w, img_h)?, gt)
        } else {
            0.0
        };
        let dtheta = angle_difference(pred.theta, gt.theta());
        let angle_ok = dtheta < max_angle;
        success |= angle_ok && iou > th.min_iou;
        if best_any.map_or(true, |(_, b, _)| iou > b) {
            best_any = Some((i, iou, dtheta));
        }
        if angle_ok && best_angle_ok.map_or(true, |(_, b, _)| iou > b) {
            best_angle_ok = Some((i, iou, dtheta));
        }
    }
    let (idx, iou, dtheta) = best_angle_ok.or(best_any).expect("gts is non-empty");
    Ok(GraspEvalOutcome {
        success,
        best_iou: iou,
        best_angle_diff_deg: dtheta.to_degrees(),
        matched_gt_index: Some(idx),
    })
}
