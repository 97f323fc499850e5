//! Cornell grasp dataset ingestion and cross-validation fold splits.
//!
//! A Cornell root holds `pcdNNNNr.png` images next to `pcdNNNNcpos.txt`
//! positive-grasp annotations (possibly nested one directory deep, as in the
//! original `01/ .. 10/` release) and an object index file `z.txt` whose
//! lines read `<image number> <object id> [free text ...]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    check_rectangle, rect_from_center, GraspRectangle, Point, EDGE_REL_TOL, RIGHT_ANGLE_TOL,
};

/// Loose tolerances applied to raw annotations, which are hand labelled and
/// stored with three decimals. Rectangles within these bounds are snapped to
/// an exact rectangle.
pub const INGEST_EDGE_REL_TOL: f64 = 0.1;
pub const INGEST_ANGLE_TOL: f64 = 0.1;

pub const OBJECT_INDEX_FILE: &str = "z.txt";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("cannot read image header of {path}: {msg}")]
    ImageHeader { path: PathBuf, msg: String },
    #[error("object index: {0}")]
    ObjectIndex(String),
    #[error("category map: {0}")]
    CategoryMap(String),
    #[error("fold split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of parsing one `cpos` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedAnnotations {
    pub rects: Vec<GraspRectangle>,
    /// Groups dropped because a coordinate was NaN or infinite.
    pub dropped_nonfinite: usize,
    /// Groups dropped because the four points are too far from a rectangle.
    pub dropped_invalid: usize,
}

impl ParsedAnnotations {
    pub fn dropped(&self) -> usize {
        self.dropped_nonfinite + self.dropped_invalid
    }
}

/// Parses Cornell `cpos` content: one `x y` pair per line, four lines per
/// rectangle. Blank lines are ignored.
pub fn parse_annotation_file(content: &str) -> Result<ParsedAnnotations, IngestError> {
    let mut points = Vec::new();
    let mut last_line = 0;
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        last_line = line_no;
        let mut toks = trimmed.split_whitespace();
        let mut coord = || -> Result<f64, IngestError> {
            let tok = toks.next().ok_or_else(|| IngestError::Format {
                line: line_no,
                msg: "expected two numbers".into(),
            })?;
            tok.parse::<f64>().map_err(|_| IngestError::Format {
                line: line_no,
                msg: format!("unparseable token {tok:?}"),
            })
        };
        let x = coord()?;
        let y = coord()?;
        if toks.next().is_some() {
            return Err(IngestError::Format {
                line: line_no,
                msg: "more than two tokens".into(),
            });
        }
        points.push(Point::new(x, y));
    }
    if points.len() % 4 != 0 {
        return Err(IngestError::Format {
            line: last_line,
            msg: format!("{} points is not a multiple of 4", points.len()),
        });
    }

    let mut out = ParsedAnnotations::default();
    for group in points.chunks_exact(4) {
        let v = [group[0], group[1], group[2], group[3]];
        if v.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            out.dropped_nonfinite += 1;
            continue;
        }
        match canonicalize(v) {
            Some(r) => out.rects.push(r),
            None => out.dropped_invalid += 1,
        }
    }
    Ok(out)
}

/// Keeps the Cornell vertex order (`v0v1` is a jaw plate edge). Shapes that
/// pass the strict check are returned untouched; near-rectangles are
/// snapped to the exact rectangle with the same center, closing axis and
/// mean edge lengths.
fn canonicalize(v: [Point; 4]) -> Option<GraspRectangle> {
    if check_rectangle(&v, EDGE_REL_TOL, RIGHT_ANGLE_TOL).is_ok() {
        return Some(GraspRectangle::from_vertices_unchecked(v));
    }
    check_rectangle(&v, INGEST_EDGE_REL_TOL, INGEST_ANGLE_TOL).ok()?;
    let raw = GraspRectangle::from_vertices_unchecked(v);
    let w = 0.5 * (v[1].dist(v[2]) + v[3].dist(v[0]));
    let plate = 0.5 * (v[0].dist(v[1]) + v[2].dist(v[3]));
    let exact = rect_from_center(raw.center(), raw.theta(), w, plate);
    let corners = *exact.vertices();
    // keep each original vertex's position in the cycle
    let mut snapped = [Point::default(); 4];
    let mut used = [false; 4];
    for (slot, orig) in snapped.iter_mut().zip(v) {
        let (j, _) = corners
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .min_by(|a, b| orig.dist(*a.1).total_cmp(&orig.dist(*b.1)))?;
        used[j] = true;
        *slot = corners[j];
    }
    GraspRectangle::from_vertices(snapped).ok()
}

/// Writes rectangles in `cpos` layout with round-trip exact numbers.
pub fn write_annotation_file(rects: &[GraspRectangle]) -> String {
    let mut s = String::new();
    for r in rects {
        for p in r.vertices() {
            s.push_str(&format!("{} {}\n", p.x, p.y));
        }
    }
    s
}

/// Object id to category name, with a fallback for unmapped ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub fallback: String,
    #[serde(rename = "objects")]
    pub entries: BTreeMap<u32, String>,
}

impl CategoryMap {
    /// The bundled seed mapping.
    pub fn seed() -> Self {
        Self::from_json(include_str!("../data/categories.json")).expect("bundled category map is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let map: CategoryMap =
            serde_json::from_str(text).map_err(|e| IngestError::CategoryMap(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.fallback.trim().is_empty() {
            return Err(IngestError::CategoryMap("fallback category is empty".into()));
        }
        if let Some((id, _)) = self.entries.iter().find(|(_, c)| c.trim().is_empty()) {
            return Err(IngestError::CategoryMap(format!("object {id} has an empty category")));
        }
        Ok(())
    }

    pub fn category(&self, object_id: u32) -> &str {
        self.entries.get(&object_id).unwrap_or(&self.fallback)
    }

    /// Every category a sample can resolve to, fallback included.
    pub fn categories(&self) -> BTreeSet<&str> {
        self.entries
            .values()
            .map(String::as_str)
            .chain([self.fallback.as_str()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornellSample {
    pub image_id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub object_id: u32,
    pub category: String,
    pub positive_rects: Vec<GraspRectangle>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub warnings: Vec<String>,
    pub dropped_nonfinite: usize,
    pub dropped_invalid: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub samples: Vec<CornellSample>,
    pub report: IngestReport,
}

/// Parses an object index (`<image number> <object id> ...` per line).
pub fn parse_object_index(content: &str) -> Result<BTreeMap<u32, u32>, IngestError> {
    let mut index = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let mut toks = line.split_whitespace();
        let (Some(img), Some(obj)) = (toks.next(), toks.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(IngestError::ObjectIndex(format!("line {}: expected two fields", i + 1)));
        };
        let parse = |t: &str| {
            t.parse::<u32>()
                .map_err(|_| IngestError::ObjectIndex(format!("line {}: bad number {t:?}", i + 1)))
        };
        index.insert(parse(img)?, parse(obj)?);
    }
    Ok(index)
}

/// `pcd0100r.png` -> (`pcd0100`, 100)
fn image_stem(name: &str) -> Option<(String, u32)> {
    let id = name.strip_suffix("r.png")?;
    let digits = id.strip_prefix("pcd")?;
    let number = digits.parse().ok()?;
    Some((id.to_string(), number))
}

fn collect_images(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            if depth > 0 {
                collect_images(&path, depth - 1, out)?;
            }
        } else if path.file_name().and_then(|n| n.to_str()).and_then(image_stem).is_some() {
            out.push(path);
        }
    }
    Ok(())
}

/// Loads every image with at least one valid positive rectangle, sorted by
/// image id.
pub fn load_dataset(root: &Path, cmap: &CategoryMap) -> Result<LoadedDataset, IngestError> {
    let mut loaded = LoadedDataset::default();
    let mut images = Vec::new();
    collect_images(root, 1, &mut images)?;
    if images.is_empty() {
        let msg = format!("no pcd*r.png images under {}", root.display());
        log::warn!("{msg}");
        loaded.report.warnings.push(msg);
        return Ok(loaded);
    }
    let index_path = root.join(OBJECT_INDEX_FILE);
    if !index_path.exists() {
        return Err(IngestError::ObjectIndex(format!("{} not found", index_path.display())));
    }
    let index = parse_object_index(&fs::read_to_string(&index_path)?)?;

    let mut by_id: Vec<(String, u32, PathBuf)> = images
        .into_iter()
        .filter_map(|p| {
            let (id, n) = image_stem(p.file_name()?.to_str()?)?;
            Some((id, n, p))
        })
        .collect();
    by_id.sort_by(|a, b| a.0.cmp(&b.0));

    let report = &mut loaded.report;
    for (image_id, number, image_path) in by_id {
        let cpos = image_path.with_file_name(format!("{image_id}cpos.txt"));
        let Ok(content) = fs::read_to_string(&cpos) else {
            let msg = format!("{image_id}: missing annotation {}", cpos.display());
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        };
        let parsed = parse_annotation_file(&content).map_err(|e| match e {
            IngestError::Format { line, msg } => IngestError::Format {
                line,
                msg: format!("{}: {msg}", cpos.display()),
            },
            other => other,
        })?;
        report.dropped_nonfinite += parsed.dropped_nonfinite;
        report.dropped_invalid += parsed.dropped_invalid;
        if parsed.dropped() > 0 {
            log::debug!("{image_id}: dropped {} rectangles", parsed.dropped());
        }
        if parsed.rects.is_empty() {
            let msg = format!("{image_id}: no valid positive rectangles");
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        let (width, height) = image::image_dimensions(&image_path).map_err(|e| IngestError::ImageHeader {
            path: image_path.clone(),
            msg: e.to_string(),
        })?;
        if width == 0 || height == 0 {
            return Err(IngestError::ImageHeader {
                path: image_path,
                msg: "zero-sized image".into(),
            });
        }
        let Some(&object_id) = index.get(&number) else {
            let msg = format!("{image_id}: image number {number} missing from object index");
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        };
        loaded.samples.push(CornellSample {
            category: cmap.category(object_id).to_string(),
            image_id,
            image_path,
            width,
            height,
            object_id,
            positive_rects: parsed.rects,
        });
    }
    Ok(loaded)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    ImageWise,
    ObjectWise,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image-wise" | "iw" | "IW" => Ok(Self::ImageWise),
            "object-wise" | "ow" | "OW" => Ok(Self::ObjectWise),
            other => Err(format!("unknown split mode {other:?} (image-wise | object-wise)")),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ImageWise => "image-wise",
            Self::ObjectWise => "object-wise",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub mode: SplitMode,
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold assignment serializes")
    }

    pub fn fold_of(&self, image_id: &str) -> Option<usize> {
        self.assignment.get(image_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles the distinct units with a seeded generator and deals them
/// round-robin into `k` folds.
pub fn deal_folds<K: Ord + Clone>(units: impl IntoIterator<Item = K>, k: usize, seed: u64) -> Result<BTreeMap<K, usize>, IngestError> {
    if k < 2 {
        return Err(IngestError::Split(format!("k must be at least 2, got {k}")));
    }
    let mut units: Vec<K> = units.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if units.len() < k {
        return Err(IngestError::Split(format!(
            "k = {k} exceeds the number of split units ({})",
            units.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    Ok(units.into_iter().enumerate().map(|(i, u)| (u, i % k)).collect())
}

/// Image-wise or object-wise `k`-fold partition of the samples.
pub fn split_folds(samples: &[CornellSample], mode: SplitMode, k: usize, seed: u64) -> Result<FoldAssignment, IngestError> {
    if samples.is_empty() {
        return Err(IngestError::Split("no samples to split".into()));
    }
    let assignment = match mode {
        SplitMode::ImageWise => deal_folds(samples.iter().map(|s| s.image_id.clone()), k, seed)?,
        SplitMode::ObjectWise => {
            let objects = deal_folds(samples.iter().map(|s| s.object_id), k, seed)?;
            samples
                .iter()
                .map(|s| (s.image_id.clone(), objects[&s.object_id]))
                .collect()
        }
    };
    Ok(FoldAssignment { mode, k, seed, assignment })
}
