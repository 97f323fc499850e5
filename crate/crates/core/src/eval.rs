//! Fold-based evaluation of a model client with the rectangle metric, and
//! deterministic test-double clients.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{predict, ChatRequest, ClientError, ModelClient};
use crate::cornell::SplitMode;
use crate::geometry::{rectangle_metric, GeometryError, GraspPose, GraspRectangle, MetricThresholds};
use crate::parser::parse_pose;
use crate::templates::{AnswerVariant, TemplateBank};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("aggregation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Contract(String),
}

/// One test sample: where its image lives, what to ask, and every positive
/// rectangle it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub image: PathBuf,
    pub instruction: String,
    pub width: u32,
    pub height: u32,
    pub gt_rects: Vec<GraspRectangle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Success,
    Failure,
    ParseError,
    InfraError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub status: RowStatus,
    pub pose: Option<GraspPose>,
    pub best_iou: Option<f64>,
    pub angle_diff_deg: Option<f64>,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub rows: Vec<SampleRow>,
    pub successes: usize,
    pub failures: usize,
    pub parse_errors: usize,
    /// Excluded from the accuracy denominator.
    pub infra_errors: usize,
    pub accuracy: f64,
}

impl FoldReport {
    fn from_rows(fold_index: usize, rows: Vec<SampleRow>) -> Self {
        let count = |s: RowStatus| rows.iter().filter(|r| r.status == s).count();
        let successes = count(RowStatus::Success);
        let failures = count(RowStatus::Failure);
        let parse_errors = count(RowStatus::ParseError);
        let infra_errors = count(RowStatus::InfraError);
        let scored = successes + failures + parse_errors;
        let accuracy = if scored == 0 { 0.0 } else { successes as f64 / scored as f64 };
        Self {
            fold_index,
            rows,
            successes,
            failures,
            parse_errors,
            infra_errors,
            accuracy,
        }
    }

    pub fn scored(&self) -> usize {
        self.successes + self.failures + self.parse_errors
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn score_sample(client: &dyn ModelClient, sample: &EvalSample, th: &MetricThresholds) -> SampleRow {
    let row = |status, pose, iou, angle, error: Option<String>| SampleRow {
        sample_id: sample.id.clone(),
        status,
        pose,
        best_iou: iou,
        angle_diff_deg: angle,
        success: status == RowStatus::Success,
        error,
    };
    let image = match std::fs::read(&sample.image) {
        Ok(bytes) => bytes,
        Err(e) => {
            return row(
                RowStatus::InfraError,
                None,
                None,
                None,
                Some(format!("{}: {e}", sample.image.display())),
            )
        }
    };
    let reply = match predict(client, Some(&sample.id), image, &sample.instruction) {
        Ok(r) => r,
        Err(e) => return row(RowStatus::InfraError, None, None, None, Some(e.to_string())),
    };
    let parsed = parse_pose(&reply);
    let Some(pose) = parsed.pose else {
        return row(RowStatus::ParseError, None, None, None, Some(parsed.diagnostics.join("; ")));
    };
    match rectangle_metric(&pose, &sample.gt_rects, th, sample.width as f64, sample.height as f64) {
        Ok(out) => row(
            if out.success { RowStatus::Success } else { RowStatus::Failure },
            Some(pose),
            Some(out.best_iou),
            Some(out.best_angle_diff_deg),
            None,
        ),
        Err(e) => row(RowStatus::InfraError, Some(pose), None, None, Some(e.to_string())),
    }
}

/// Queries the client for every sample with at most `parallelism` requests
/// in flight. Rows come back in sample order whatever the completion order.
pub fn evaluate_fold(
    client: &dyn ModelClient,
    fold_index: usize,
    samples: &[EvalSample],
    th: &MetricThresholds,
    parallelism: usize,
) -> Result<FoldReport, EvalError> {
    th.validate()?;
    if parallelism == 0 {
        return Err(EvalError::Contract("parallelism must be positive".into()));
    }
    let workers = if client.supports_concurrency() { parallelism.min(samples.len().max(1)) } else { 1 };
    let slots: Mutex<Vec<Option<SampleRow>>> = Mutex::new(vec![None; samples.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                let row = score_sample(client, sample, th);
                slots.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let rows = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect();
    Ok(FoldReport::from_rows(fold_index, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub min_iou: f64,
    pub max_angle_deg: f64,
    pub seed: u64,
    pub model_id: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: SplitMode,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub infra_errors: usize,
    pub fingerprint: ConfigFingerprint,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Mean and sample standard deviation of the fold accuracies.
pub fn aggregate(reports: &[FoldReport], mode: SplitMode, fingerprint: ConfigFingerprint) -> Result<EvalSummary, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewFolds(reports.len()));
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(EvalSummary {
        mode,
        fold_accuracies: accs,
        mean,
        std: var.sqrt(),
        infra_errors: reports.iter().map(|r| r.infra_errors).sum(),
        fingerprint,
    })
}

fn cell(summary: Option<&EvalSummary>) -> String {
    summary.map_or_else(|| "-".to_string(), |s| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std))
}

/// Text table with image-wise and object-wise accuracy columns in percent.
pub fn format_table(rows: &[(String, Option<EvalSummary>, Option<EvalSummary>)]) -> String {
    let name_w = rows.iter().map(|r| r.0.chars().count()).chain([6]).max().unwrap_or(6);
    let mut out = format!(
        "{:<name_w$} | {:^16} | {:^16}\n{}\n",
        "Method",
        "Image-Wise (IW)",
        "Object-Wise (OW)",
        "-".repeat(name_w + 38)
    );
    for (name, iw, ow) in rows {
        out.push_str(&format!("{:<name_w$} | {:^16} | {:^16}\n", name, cell(iw.as_ref()), cell(ow.as_ref())));
    }
    out
}

/// Deterministic stand-ins for a model endpoint.
#[derive(Debug, Clone)]
pub enum MockMode {
    /// Answers each known sample with its ground-truth pose inside a full
    /// structured answer.
    Oracle(BTreeMap<String, GraspPose>),
    Constant(GraspPose),
    /// Replies keyed by sample id, falling back to one reply per assistant
    /// turn already in the conversation (the last one repeats).
    Scripted {
        by_sample: BTreeMap<String, String>,
        by_turn: Vec<String>,
    },
    /// Letter soup without digits.
    Gibberish,
    /// Always fails like an unreachable endpoint.
    Failing,
}

#[derive(Debug, Clone)]
pub struct MockModel {
    pub mode: MockMode,
    pub delay: Option<Duration>,
    bank: TemplateBank,
}

impl MockModel {
    pub fn new(mode: MockMode) -> Self {
        Self {
            mode,
            delay: None,
            bank: TemplateBank::seed(),
        }
    }

    pub fn oracle(poses: BTreeMap<String, GraspPose>) -> Self {
        Self::new(MockMode::Oracle(poses))
    }

    pub fn constant(pose: GraspPose) -> Self {
        Self::new(MockMode::Constant(pose))
    }

    pub fn scripted_turns(replies: Vec<String>) -> Self {
        Self::new(MockMode::Scripted {
            by_sample: BTreeMap::new(),
            by_turn: replies,
        })
    }

    pub fn scripted_samples(replies: BTreeMap<String, String>) -> Self {
        Self::new(MockMode::Scripted {
            by_sample: replies,
            by_turn: Vec::new(),
        })
    }

    pub fn gibberish() -> Self {
        Self::new(MockMode::Gibberish)
    }

    pub fn failing() -> Self {
        Self::new(MockMode::Failing)
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }
}

fn seed_of(s: &str) -> u64 {
    // FNV-1a, stable across runs and platforms
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn gibberish(seed: u64) -> String {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = rng.gen_range(8..20);
    (0..words)
        .map(|_| {
            let len = rng.gen_range(2..9);
            (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl ModelClient for MockModel {
    fn complete(&self, req: &ChatRequest) -> Result<String, ClientError> {
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let id = req.sample_id.as_deref().unwrap_or("");
        let full = |pose: &GraspPose| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_of(id));
            self.bank
                .render_answer("object", pose, AnswerVariant::Full, &mut rng)
                .map(|a| a.full_text)
                .map_err(|e| ClientError::InvalidResponse(e.to_string()))
        };
        match &self.mode {
            MockMode::Oracle(poses) => match poses.get(id) {
                Some(p) => full(p),
                None => Ok(format!("I have no ground truth for sample {id:?}.")),
            },
            MockMode::Constant(p) => full(p),
            MockMode::Scripted { by_sample, by_turn } => {
                if let Some(r) = by_sample.get(id) {
                    return Ok(r.clone());
                }
                let turn = req.assistant_turns().min(by_turn.len().saturating_sub(1));
                by_turn
                    .get(turn)
                    .cloned()
                    .ok_or_else(|| ClientError::InvalidResponse(format!("no scripted reply for {id:?}")))
            }
            MockMode::Gibberish => {
                let last = req.messages.last().map(|m| m.text.as_str()).unwrap_or("");
                Ok(gibberish(seed_of(id) ^ seed_of(last)))
            }
            MockMode::Failing => Err(ClientError::Transport {
                attempts: 1,
                message: "mock endpoint is unreachable".into(),
            }),
        }
    }

    fn model_id(&self) -> String {
        match self.mode {
            MockMode::Oracle(_) => "mock-oracle",
            MockMode::Constant(_) => "mock-constant",
            MockMode::Scripted { .. } => "mock-scripted",
            MockMode::Gibberish => "mock-gibberish",
            MockMode::Failing => "mock-failing",
        }
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rect_to_pose, Point};
    use std::io::Write;

    fn fingerprint() -> ConfigFingerprint {
        ConfigFingerprint {
            min_iou: 0.25,
            max_angle_deg: 30.0,
            seed: 0,
            model_id: "test".into(),
            k: 5,
        }
    }

    fn report(acc: f64) -> FoldReport {
        FoldReport {
            fold_index: 0,
            rows: vec![],
            successes: 0,
            failures: 0,
            parse_errors: 0,
            infra_errors: 0,
            accuracy: acc,
        }
    }

    #[test]
    fn aggregate_arithmetic() {
        let reports: Vec<_> = [0.80, 0.82, 0.84, 0.86, 0.88].into_iter().map(report).collect();
        let s = aggregate(&reports, SplitMode::ImageWise, fingerprint()).unwrap();
        assert!((s.mean - 0.84).abs() < 1e-12);
        // sqrt(0.001 / 4)
        assert!((s.std - 0.0158113883 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn aggregate_zero_variance_and_contract() {
        let reports: Vec<_> = [0.5, 0.5, 0.5].into_iter().map(report).collect();
        assert_eq!(aggregate(&reports, SplitMode::ObjectWise, fingerprint()).unwrap().std, 0.0);
        assert!(matches!(
            aggregate(&reports[..1], SplitMode::ObjectWise, fingerprint()),
            Err(EvalError::TooFewFolds(1))
        ));
    }

    fn axis_box(x0: f64, y0: f64, x1: f64, y1: f64) -> GraspRectangle {
        GraspRectangle::from_vertices([(x0, y0), (x1, y0), (x1, y1), (x0, y1)].map(|(x, y)| Point::new(x, y))).unwrap()
    }

    fn fixture_samples(dir: &std::path::Path) -> Vec<EvalSample> {
        let img = dir.join("img.png");
        let mut f = std::fs::File::create(&img).unwrap();
        f.write_all(b"\x89PNG\r\n\x1a\nnot really").unwrap();
        // 200 x 200 images; the constant pose {0.5, 0.5, 0} is the
        // rectangle centered at (100, 100) with a horizontal closing axis
        let centered = {
            let v = *axis_box(80.0, 90.0, 120.0, 110.0).vertices();
            // first edge vertical, so the closing axis is horizontal
            GraspRectangle::from_vertices([v[1], v[2], v[3], v[0]]).unwrap()
        };
        let off_center = axis_box(10.0, 10.0, 50.0, 30.0);
        // first edge horizontal: closing axis vertical
        let rotated = axis_box(80.0, 90.0, 120.0, 110.0);
        [("a", centered), ("b", off_center), ("c", rotated)]
            .into_iter()
            .map(|(id, r)| EvalSample {
                id: id.into(),
                image: img.clone(),
                instruction: "Grasp.".into(),
                width: 200,
                height: 200,
                gt_rects: vec![r],
            })
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let samples = fixture_samples(dir.path());
        let poses = samples
            .iter()
            .map(|s| (s.id.clone(), rect_to_pose(&s.gt_rects[0], 200.0, 200.0).unwrap()))
            .collect();
        let r = evaluate_fold(&MockModel::oracle(poses), 0, &samples, &MetricThresholds::default(), 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn constant_client_matches_one_of_three() {
        let dir = tempfile::tempdir().unwrap();
        let samples = fixture_samples(dir.path());
        let client = MockModel::scripted_turns(vec!["{0.5, 0.5, 0.0}".into()]);
        let r = evaluate_fold(&client, 0, &samples, &MetricThresholds::default(), 3).unwrap();
        assert_eq!(r.successes, 1);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.rows[0].status, RowStatus::Success);
        assert_eq!(r.rows[1].status, RowStatus::Failure);
        // same center and size but the closing axis is off by 90 degrees
        assert_eq!(r.rows[2].angle_diff_deg.map(f64::round), Some(90.0));
    }

    #[test]
    fn gibberish_is_all_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let samples = fixture_samples(dir.path());
        let r = evaluate_fold(&MockModel::gibberish(), 0, &samples, &MetricThresholds::default(), 1).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.parse_errors, 3);
    }

    #[test]
    fn infra_errors_leave_the_denominator() {
        let dir = tempfile::tempdir().unwrap();
        let samples = fixture_samples(dir.path());
        let r = evaluate_fold(&MockModel::failing(), 0, &samples, &MetricThresholds::default(), 2).unwrap();
        assert_eq!(r.infra_errors, 3);
        assert_eq!(r.scored(), 0);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn rows_are_ordered_and_parallelism_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let samples = fixture_samples(dir.path());
        let client = MockModel::constant(GraspPose::new(0.5, 0.5, 0.0).unwrap()).with_delay(Duration::from_millis(5));
        let a = evaluate_fold(&client, 0, &samples, &MetricThresholds::default(), 1).unwrap();
        let b = evaluate_fold(&client, 0, &samples, &MetricThresholds::default(), 3).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let ids: Vec<_> = a.rows.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn constant_origin_misses_central_objects() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = fixture_samples(dir.path());
        samples.remove(1);
        let r = evaluate_fold(
            &MockModel::constant(GraspPose::new(0.0, 0.0, 0.0).unwrap()),
            0,
            &samples,
            &MetricThresholds::default(),
            2,
        )
        .unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert!(r.rows.iter().all(|row| row.best_iou.unwrap() <= 0.25));
    }

    #[test]
    fn table_layout() {
        let s = EvalSummary {
            mode: SplitMode::ImageWise,
            fold_accuracies: vec![0.8, 0.9],
            mean: 0.8405,
            std: 0.0078,
            infra_errors: 0,
            fingerprint: fingerprint(),
        };
        let t = format_table(&[("LoRA".into(), Some(s), None)]);
        assert!(t.contains("Image-Wise (IW)"));
        assert!(t.contains("84.05±0.78"));
    }

    #[test]
    fn gibberish_has_no_digits() {
        for i in 0..100 {
            assert!(!gibberish(i).chars().any(|c| c.is_ascii_digit()));
        }
    }
}
