//! Geometric augmentation (rotation, zoom, square crop) applied jointly to
//! images and their grasp labels.
//!
//! A variant maps a source pixel `p` to output pixel
//! `(c + R(rotation) (p - c) / zoom - crop_origin) * output_size / crop_size`
//! where `c` is the source image center. Labels are transformed with this
//! map directly; images are resampled through its inverse.

use std::f64::consts::FRAC_PI_2;

use image::{ImageBuffer, Pixel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cornell::CornellSample;
use crate::geometry::{GraspRectangle, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("every rectangle fell outside the crop")]
    EmptyLabels,
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    /// Counter-clockwise in pixel coordinates (x right, y down), radians.
    pub rotation: f64,
    /// Values below 1 magnify.
    pub zoom: f64,
    /// Top-left corner of the crop in the rotated, zoomed frame.
    pub crop_origin: Point,
    /// Crop side in the rotated, zoomed frame.
    pub crop_size: f64,
    pub source_width: u32,
    pub source_height: u32,
    pub output_size: u32,
}

impl AugmentationParams {
    /// Identity transform for a square image of side `size`.
    pub fn identity(size: u32) -> Self {
        Self {
            rotation: 0.0,
            zoom: 1.0,
            crop_origin: Point::new(0.0, 0.0),
            crop_size: size as f64,
            source_width: size,
            source_height: size,
            output_size: size,
        }
    }

    fn source_center(&self) -> Point {
        Point::new(0.5 * self.source_width as f64, 0.5 * self.source_height as f64)
    }

    fn output_scale(&self) -> f64 {
        self.output_size as f64 / self.crop_size
    }

    /// Source pixel coordinates to output pixel coordinates.
    pub fn apply(&self, p: Point) -> Point {
        let c = self.source_center();
        let (s, co) = self.rotation.sin_cos();
        let (dx, dy) = ((p.x - c.x) / self.zoom, (p.y - c.y) / self.zoom);
        let k = self.output_scale();
        Point::new(
            (c.x + co * dx - s * dy - self.crop_origin.x) * k,
            (c.y + s * dx + co * dy - self.crop_origin.y) * k,
        )
    }

    /// Output pixel coordinates back to source pixel coordinates.
    pub fn invert(&self, q: Point) -> Point {
        let c = self.source_center();
        let k = self.output_scale();
        let (dx, dy) = (q.x / k + self.crop_origin.x - c.x, q.y / k + self.crop_origin.y - c.y);
        let (s, co) = self.rotation.sin_cos();
        Point::new(
            c.x + self.zoom * (co * dx + s * dy),
            c.y + self.zoom * (-s * dx + co * dy),
        )
    }

    /// Whether every crop corner maps back inside the source image.
    pub fn crop_fits(&self) -> bool {
        let n = self.output_size as f64;
        let (w, h) = (self.source_width as f64, self.source_height as f64);
        let tol = 1e-9 * w.max(h);
        [(0.0, 0.0), (n, 0.0), (n, n), (0.0, n)].iter().all(|&(x, y)| {
            let p = self.invert(Point::new(x, y));
            p.x >= -tol && p.x <= w + tol && p.y >= -tol && p.y <= h + tol
        })
    }

    fn inside_output(&self, q: Point) -> bool {
        let n = self.output_size as f64;
        q.x >= 0.0 && q.x <= n && q.y >= 0.0 && q.y <= n
    }
}

/// Maps rectangles into the augmented frame, dropping those whose center
/// leaves the crop.
pub fn transform_rects(
    rects: &[GraspRectangle],
    params: &AugmentationParams,
) -> Result<Vec<GraspRectangle>, AugmentError> {
    let out: Vec<GraspRectangle> = rects
        .iter()
        .map(|r| r.map_vertices(|p| params.apply(p)))
        .filter(|r| params.inside_output(r.center()))
        .collect();
    if out.is_empty() {
        Err(AugmentError::EmptyLabels)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub per_image_count: usize,
    /// Half-open `[lo, hi)` rotation interval in radians.
    pub rotation_range: (f64, f64),
    pub zoom_range: (f64, f64),
    pub output_size: u32,
    /// Crop side in the rotated, zoomed frame; `None` takes the full short
    /// side of the source image.
    pub crop_size: Option<u32>,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            per_image_count: 86,
            rotation_range: (-FRAC_PI_2, FRAC_PI_2),
            zoom_range: (0.8, 1.1),
            output_size: 224,
            crop_size: Some(300),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No rotation, no zoom, full-frame crop.
    pub fn identity(per_image_count: usize, output_size: u32, seed: u64) -> Self {
        Self {
            per_image_count,
            rotation_range: (0.0, 0.0),
            zoom_range: (1.0, 1.0),
            output_size,
            crop_size: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Config(m));
        if self.per_image_count < 1 {
            return bad("per_image_count must be at least 1".into());
        }
        if self.output_size == 0 {
            return bad("output_size must be positive".into());
        }
        let (zl, zh) = self.zoom_range;
        if !(zl > 0.0 && zl <= zh && zh <= 2.0) {
            return bad(format!("zoom range [{zl}, {zh}] must lie in (0, 2]"));
        }
        let (rl, rh) = self.rotation_range;
        if !(rl.is_finite() && rh.is_finite() && rl <= rh) {
            return bad(format!("bad rotation range [{rl}, {rh}]"));
        }
        if self.crop_size == Some(0) {
            return bad("crop_size must be positive".into());
        }
        Ok(())
    }
}

const ORIGIN_ATTEMPTS: usize = 32;
const PARAM_ATTEMPTS: usize = 64;

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generator for one draw index; streams are independent per index.
pub fn draw_rng(seed: u64, draw_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    rng
}

/// Draws rotation and zoom uniformly from the configured ranges and a crop
/// origin uniformly among positions that fit inside the transformed image
/// and, when given, contain `keep` (a source pixel). Returns `None` when no
/// fitting crop is found.
pub fn sample_params(
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
    source_width: u32,
    source_height: u32,
    keep: Option<Point>,
) -> Option<AugmentationParams> {
    let crop_size = cfg.crop_size.unwrap_or(source_width.min(source_height)) as f64;
    let (w, h) = (source_width as f64, source_height as f64);
    for _ in 0..PARAM_ATTEMPTS {
        let mut params = AugmentationParams {
            rotation: uniform(rng, cfg.rotation_range),
            zoom: uniform(rng, cfg.zoom_range),
            crop_origin: Point::new(0.0, 0.0),
            crop_size,
            source_width,
            source_height,
            output_size: cfg.output_size,
        };
        // rotated, zoomed frame coordinates (no crop)
        let uncropped = AugmentationParams {
            output_size: 1,
            crop_size: 1.0,
            ..params
        };
        let frame = |p: Point| uncropped.apply(p);
        let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)].map(|(x, y)| frame(Point::new(x, y)));
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&Point) -> f64| corners.iter().map(sel).fold(init, f);
        let mut lo_x = fold(f64::min, f64::MAX, |p| p.x);
        let mut hi_x = fold(f64::max, f64::MIN, |p| p.x) - crop_size;
        let mut lo_y = fold(f64::min, f64::MAX, |p| p.y);
        let mut hi_y = fold(f64::max, f64::MIN, |p| p.y) - crop_size;
        if let Some(p) = keep {
            let q = frame(p);
            lo_x = lo_x.max(q.x - crop_size);
            hi_x = hi_x.min(q.x);
            lo_y = lo_y.max(q.y - crop_size);
            hi_y = hi_y.min(q.y);
        }
        if hi_x < lo_x || hi_y < lo_y {
            continue;
        }
        for _ in 0..ORIGIN_ATTEMPTS {
            params.crop_origin = Point::new(uniform(rng, (lo_x, hi_x)), uniform(rng, (lo_y, hi_y)));
            if params.crop_fits() {
                return Some(params);
            }
        }
    }
    None
}

/// One planned augmented variant of a source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedVariant {
    pub sample_index: usize,
    pub variant_index: usize,
    pub params: AugmentationParams,
    /// Index into `rects` of the grasp used as the training target.
    pub target_index: usize,
    /// All positive rectangles that survive the transform.
    pub rects: Vec<GraspRectangle>,
}

#[derive(Debug, Clone, Default)]
pub struct ExpansionPlan {
    pub variants: Vec<PlannedVariant>,
    /// Variants for which no valid crop was found.
    pub dropped: usize,
}

impl ExpansionPlan {
    pub fn planned(&self) -> usize {
        self.variants.len() + self.dropped
    }
}

/// Plans `per_image_count` variants per sample, ordered by
/// (sample, variant). Each variant picks one positive rectangle uniformly
/// as its target and keeps its center inside the crop.
pub fn expand_dataset(samples: &[CornellSample], cfg: &AugmentationConfig) -> Result<ExpansionPlan, AugmentError> {
    cfg.validate()?;
    let mut plan = ExpansionPlan::default();
    for (si, sample) in samples.iter().enumerate() {
        for vi in 0..cfg.per_image_count {
            let draw = (si * cfg.per_image_count + vi) as u64;
            match plan_variant(sample, cfg, draw) {
                Some((params, target_index, rects)) => plan.variants.push(PlannedVariant {
                    sample_index: si,
                    variant_index: vi,
                    params,
                    target_index,
                    rects,
                }),
                None => {
                    log::warn!("{}: variant {vi} dropped, no valid crop", sample.image_id);
                    plan.dropped += 1;
                }
            }
        }
    }
    Ok(plan)
}

fn plan_variant(
    sample: &CornellSample,
    cfg: &AugmentationConfig,
    draw: u64,
) -> Option<(AugmentationParams, usize, Vec<GraspRectangle>)> {
    if sample.positive_rects.is_empty() {
        return None;
    }
    let mut rng = draw_rng(cfg.seed, draw);
    let chosen = rng.gen_range(0..sample.positive_rects.len());
    let target = sample.positive_rects[chosen];
    let params = sample_params(cfg, &mut rng, sample.width, sample.height, Some(target.center()))?;
    // keep the target first-class: locate it among the surviving rectangles
    let mut rects = Vec::new();
    let mut target_index = None;
    for (i, r) in sample.positive_rects.iter().enumerate() {
        let t = r.map_vertices(|p| params.apply(p));
        if params.inside_output(t.center()) {
            if i == chosen {
                target_index = Some(rects.len());
            }
            rects.push(t);
        }
    }
    Some((params, target_index?, rects))
}

/// Resamples `src` into the augmented frame with bilinear interpolation.
/// Pixels mapping outside the source are black.
pub fn warp_image<P>(src: &ImageBuffer<P, Vec<u8>>, params: &AugmentationParams) -> ImageBuffer<P, Vec<u8>>
where
    P: Pixel<Subpixel = u8>,
{
    let n = params.output_size;
    let channels = P::CHANNEL_COUNT as usize;
    let (sw, sh) = (src.width() as i64, src.height() as i64);
    let raw = src.as_raw();
    let mut out = vec![0u8; n as usize * n as usize * channels];
    let fetch = |x: i64, y: i64, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= sw || y >= sh {
            0.0
        } else {
            raw[(y * sw + x) as usize * channels + ch] as f64
        }
    };
    for oy in 0..n {
        for ox in 0..n {
            let p = params.invert(Point::new(ox as f64 + 0.5, oy as f64 + 0.5));
            // pixel centers sit at +0.5
            let (fx, fy) = (p.x - 0.5, p.y - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let base = (oy as usize * n as usize + ox as usize) * channels;
            for ch in 0..channels {
                let v = (1.0 - ay) * ((1.0 - ax) * fetch(x0, y0, ch) + ax * fetch(x0 + 1, y0, ch))
                    + ay * ((1.0 - ax) * fetch(x0, y0 + 1, ch) + ax * fetch(x0 + 1, y0 + 1, ch));
                out[base + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::from_raw(n, n, out).expect("buffer size matches")
}
