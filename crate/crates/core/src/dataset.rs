//! Materializes augmented Cornell samples as a JSONL image-text dataset.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{expand_dataset, warp_image, AugmentError, AugmentationConfig, AugmentationParams};
use crate::cornell::{deal_folds, CornellSample, IngestError, SplitMode};
use crate::eval::EvalSample;
use crate::geometry::{rect_to_pose, GeometryError, GraspPose, GraspRectangle};
use crate::templates::{quantize_pose, AnswerVariant, StructuredAnswer, TemplateBank, TemplateError};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const IMAGE_DIR: &str = "images";

/// Text draws use their own generator streams, disjoint from the geometric
/// ones.
const TEXT_STREAM_OFFSET: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}:{line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Split(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Relative to the dataset directory.
    pub image: String,
    pub category: String,
    pub instruction: String,
    pub answer: StructuredAnswer,
    pub pose: GraspPose,
    pub variant: AnswerVariant,
    pub augmentation: AugmentationParams,
    pub source_image: String,
    pub object_id: u32,
    pub width: u32,
    pub height: u32,
    /// Every positive rectangle that survived the transform, in output
    /// pixels. The target grasp is among them.
    pub gt_rects: Vec<GraspRectangle>,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub augmentation: AugmentationConfig,
    pub variant: AnswerVariant,
    /// Accept banks with templates still awaiting review.
    pub allow_unreviewed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub records: usize,
    pub dropped_variants: usize,
    pub dataset_path: PathBuf,
}

fn text_rng(seed: u64, draw: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TEXT_STREAM_OFFSET | draw);
    rng
}

/// Renders one record per planned variant. Images are not touched.
pub fn plan_records(
    samples: &[CornellSample],
    bank: &TemplateBank,
    opts: &BuildOptions,
) -> Result<(Vec<DatasetRecord>, usize), DatasetError> {
    bank.validate()?;
    if !opts.allow_unreviewed {
        bank.require_reviewed()?;
    }
    let cfg = &opts.augmentation;
    let plan = expand_dataset(samples, cfg)?;
    let out = cfg.output_size as f64;
    let mut records = Vec::with_capacity(plan.variants.len());
    for v in &plan.variants {
        let sample = &samples[v.sample_index];
        let draw = (v.sample_index * cfg.per_image_count + v.variant_index) as u64;
        let mut rng = text_rng(cfg.seed, draw);
        let pose = quantize_pose(&rect_to_pose(&v.rects[v.target_index], out, out)?);
        let instruction = bank.render_instruction(&mut rng).to_string();
        let answer = bank.render_answer(&sample.category, &pose, opts.variant, &mut rng)?;
        let id = format!("{}_{:03}", sample.image_id, v.variant_index);
        records.push(DatasetRecord {
            image: format!("{IMAGE_DIR}/{id}.png"),
            id,
            category: sample.category.clone(),
            instruction,
            answer,
            pose,
            variant: opts.variant,
            augmentation: v.params,
            source_image: sample.image_id.clone(),
            object_id: sample.object_id,
            width: cfg.output_size,
            height: cfg.output_size,
            gt_rects: v.rects.clone(),
        });
    }
    Ok((records, plan.dropped))
}

/// Writes `dataset.jsonl` and the augmented PNGs under `out_dir`. Output is
/// staged in a scratch directory and moved into place only once complete.
pub fn build_dataset(
    samples: &[CornellSample],
    bank: &TemplateBank,
    opts: &BuildOptions,
    out_dir: &Path,
) -> Result<BuildReport, DatasetError> {
    let (records, dropped) = plan_records(samples, bank, opts)?;
    fs::create_dir_all(out_dir)?;
    let staging = out_dir.join(".staging");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let result = write_staged(samples, &records, &staging);
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    let images = out_dir.join(IMAGE_DIR);
    if images.exists() {
        fs::remove_dir_all(&images)?;
    }
    fs::rename(staging.join(IMAGE_DIR), &images)?;
    let dataset_path = out_dir.join(DATASET_FILE);
    fs::rename(staging.join(DATASET_FILE), &dataset_path)?;
    fs::remove_dir_all(&staging)?;
    Ok(BuildReport {
        records: records.len(),
        dropped_variants: dropped,
        dataset_path,
    })
}

fn write_staged(samples: &[CornellSample], records: &[DatasetRecord], staging: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(staging.join(IMAGE_DIR))?;
    let mut jsonl = std::io::BufWriter::new(fs::File::create(staging.join(DATASET_FILE))?);
    let mut current: Option<(&str, image::RgbImage)> = None;
    for rec in records {
        let sample = samples
            .iter()
            .find(|s| s.image_id == rec.source_image)
            .expect("records come from these samples");
        if current.as_ref().map(|(id, _)| *id) != Some(sample.image_id.as_str()) {
            let img = image::open(&sample.image_path).map_err(|source| DatasetError::Image {
                path: sample.image_path.clone(),
                source,
            })?;
            current = Some((&sample.image_id, img.to_rgb8()));
        }
        let src = &current.as_ref().expect("just loaded").1;
        let path = staging.join(&rec.image);
        warp_image(src, &rec.augmentation)
            .save(&path)
            .map_err(|source| DatasetError::Image { path, source })?;
        serde_json::to_writer(&mut jsonl, rec).expect("record serializes");
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Evaluation samples for records stored under `dataset_dir`.
pub fn eval_samples(records: &[DatasetRecord], dataset_dir: &Path) -> Vec<EvalSample> {
    records
        .iter()
        .map(|r| EvalSample {
            id: r.id.clone(),
            image: dataset_dir.join(&r.image),
            instruction: r.instruction.clone(),
            width: r.width,
            height: r.height,
            gt_rects: r.gt_rects.clone(),
        })
        .collect()
}

/// Partitions records into `k` folds by source image or object. Dealing
/// the same units with the same seed as [`crate::cornell::split_folds`]
/// yields the same assignment.
pub fn fold_records(
    records: &[DatasetRecord],
    mode: SplitMode,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<DatasetRecord>>, DatasetError> {
    let mut folds = vec![Vec::new(); k];
    match mode {
        SplitMode::ImageWise => {
            let f = deal_folds(records.iter().map(|r| r.source_image.clone()), k, seed)?;
            for r in records {
                folds[f[&r.source_image]].push(r.clone());
            }
        }
        SplitMode::ObjectWise => {
            let f = deal_folds(records.iter().map(|r| r.object_id), k, seed)?;
            for r in records {
                folds[f[&r.object_id]].push(r.clone());
            }
        }
    }
    Ok(folds)
}
