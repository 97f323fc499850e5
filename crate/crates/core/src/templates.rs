//! Reasoning and instruction template banks, canonical pose text, and
//! structured answer rendering.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatMessage, ChatRequest, ClientError, ModelClient};
use crate::cornell::CategoryMap;
use crate::geometry::{wrap_angle, GraspPose};
use crate::parser::parse_pose;

/// Decimal places of every value in the canonical pose text.
pub const POSE_DECIMALS: u32 = 3;
const POSE_SCALE: f64 = 1000.0;

/// Joins the reasoning phase and the pose in full answers.
pub const LEAD_IN: &str = "\n\nTherefore, the grasp pose is ";
/// Text wrapped around the pose in the explanatory no-reasoning answer.
pub const NO_REASONING_B_PREFIX: &str = "The grasp pose is ";
pub const NO_REASONING_B_SUFFIX: &str = ", where the first two numbers give the normalized center point \
coordinates of the grasp and the third number gives the rotation angle of the gripper in radians.";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template bank: {0}")]
    Invalid(String),
    #[error("no reasoning template for category {0:?} and no fallback")]
    UnknownCategory(String),
    #[error("template bank has unreviewed templates: {0}")]
    Unreviewed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Angle of a parsed or quantized pose. Values within half a quantization
/// step of ±π/2 map to the canonical `-π/2`; anything else wraps with
/// period π.
pub fn canonical_theta(t: f64) -> f64 {
    let half_step = 0.5 / POSE_SCALE;
    if (t >= FRAC_PI_2 && t <= FRAC_PI_2 + half_step) || (t < -FRAC_PI_2 && t >= -FRAC_PI_2 - half_step) {
        -FRAC_PI_2
    } else {
        wrap_angle(t)
    }
}

fn quantum(v: f64) -> i64 {
    (v * POSE_SCALE).round_ties_even() as i64
}

/// The pose exactly as it reads back from its canonical text.
pub fn quantize_pose(p: &GraspPose) -> GraspPose {
    let q = |v: f64| quantum(v) as f64 / POSE_SCALE;
    GraspPose {
        x: q(p.x),
        y: q(p.y),
        theta: canonical_theta(q(p.theta)),
    }
}

fn fmt_quantum(k: i64) -> String {
    let sign = if k < 0 { "-" } else { "" };
    let k = k.unsigned_abs();
    format!("{sign}{}.{:03}", k / 1000, k % 1000)
}

/// Canonical text `{X, Y, T}` with three decimals, ties rounded to even.
pub fn render_pose_text(p: &GraspPose) -> String {
    format!(
        "{{{}, {}, {}}}",
        fmt_quantum(quantum(p.x)),
        fmt_quantum(quantum(p.y)),
        fmt_quantum(quantum(p.theta))
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerVariant {
    Full,
    NoReasoningA,
    NoReasoningB,
}

impl std::str::FromStr for AnswerVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Self::Full),
            "no_reasoning_a" | "a" => Ok(Self::NoReasoningA),
            "no_reasoning_b" | "b" => Ok(Self::NoReasoningB),
            _ => Err(format!("unknown answer variant {s:?} (full | no-reasoning-a | no-reasoning-b)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredAnswer {
    pub variant: AnswerVariant,
    pub reasoning_text: String,
    pub pose_text: String,
    pub full_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTemplate {
    pub text: String,
    #[serde(default)]
    pub reviewed: bool,
}

fn default_fallback() -> String {
    "object".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    /// Category whose templates serve unknown categories.
    #[serde(default = "default_fallback")]
    pub fallback: String,
    pub instructions: Vec<String>,
    pub reasoning: BTreeMap<String, Vec<ReasoningTemplate>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewStatus {
    Reviewed,
    Unreviewed,
}

/// Which categories of a category map resolve through the fallback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoverageReport {
    pub covered: Vec<String>,
    pub via_fallback: Vec<String>,
    pub warnings: Vec<String>,
}

impl TemplateBank {
    /// The bundled, reviewed seed bank.
    pub fn seed() -> Self {
        let bank = Self::from_json(include_str!("../data/templates.json")).expect("bundled bank is valid");
        bank.validate().expect("bundled bank is valid");
        bank
    }

    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        if text.trim().is_empty() {
            return Err(TemplateError::Invalid("empty template bank".into()));
        }
        serde_json::from_str(text).map_err(|e| TemplateError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    /// Structural checks independent of any category map.
    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.instructions.is_empty() {
            return Err(TemplateError::Invalid("no instruction templates".into()));
        }
        if self.instructions.iter().any(|s| s.trim().is_empty()) {
            return Err(TemplateError::Invalid("empty instruction template".into()));
        }
        for (cat, list) in &self.reasoning {
            if list.is_empty() {
                return Err(TemplateError::Invalid(format!("category {cat:?} has no templates")));
            }
            if list.iter().any(|t| t.text.trim().is_empty()) {
                return Err(TemplateError::Invalid(format!("category {cat:?} has an empty template")));
            }
            // a reasoning body must never read as a pose
            if let Some(t) = list.iter().find(|t| parse_pose(&t.text).pose.is_some()) {
                return Err(TemplateError::Invalid(format!(
                    "category {cat:?}: template contains a pose-like triple: {:?}",
                    t.text
                )));
            }
        }
        Ok(())
    }

    /// Validates against a category map; categories without templates fall
    /// back with a warning, or fail when the fallback has no templates.
    pub fn coverage(&self, cmap: &CategoryMap) -> Result<CoverageReport, TemplateError> {
        let mut report = CoverageReport::default();
        let fallback_ok = self.reasoning.contains_key(&self.fallback);
        for cat in cmap.categories() {
            if self.reasoning.contains_key(cat) {
                report.covered.push(cat.to_string());
            } else if fallback_ok {
                report.via_fallback.push(cat.to_string());
                report
                    .warnings
                    .push(format!("category {cat:?} has no templates; using {:?}", self.fallback));
            } else {
                return Err(TemplateError::UnknownCategory(cat.to_string()));
            }
        }
        Ok(report)
    }

    pub fn status(&self) -> ReviewStatus {
        if self.reasoning.values().flatten().all(|t| t.reviewed) {
            ReviewStatus::Reviewed
        } else {
            ReviewStatus::Unreviewed
        }
    }

    /// Fails unless every reasoning template carries the reviewed flag.
    pub fn require_reviewed(&self) -> Result<(), TemplateError> {
        let pending: Vec<String> = self
            .reasoning
            .iter()
            .filter(|(_, list)| list.iter().any(|t| !t.reviewed))
            .map(|(c, _)| c.clone())
            .collect();
        if pending.is_empty() {
            Ok(())
        } else {
            Err(TemplateError::Unreviewed(pending.join(", ")))
        }
    }

    fn templates_for(&self, category: &str) -> Result<&[ReasoningTemplate], TemplateError> {
        self.reasoning
            .get(category)
            .or_else(|| self.reasoning.get(&self.fallback))
            .map(Vec::as_slice)
            .ok_or_else(|| TemplateError::UnknownCategory(category.to_string()))
    }

    /// Renders the answer for `variant`. Only the full variant consumes
    /// randomness.
    pub fn render_answer<R: Rng>(
        &self,
        category: &str,
        pose: &GraspPose,
        variant: AnswerVariant,
        rng: &mut R,
    ) -> Result<StructuredAnswer, TemplateError> {
        let pose_text = render_pose_text(pose);
        let (reasoning_text, full_text) = match variant {
            AnswerVariant::Full => {
                let list = self.templates_for(category)?;
                let reasoning = list[rng.gen_range(0..list.len())].text.trim().to_string();
                let full = format!("{reasoning}{LEAD_IN}{pose_text}");
                (reasoning, full)
            }
            AnswerVariant::NoReasoningA => (String::new(), pose_text.clone()),
            AnswerVariant::NoReasoningB => (
                String::new(),
                format!("{NO_REASONING_B_PREFIX}{pose_text}{NO_REASONING_B_SUFFIX}"),
            ),
        };
        Ok(StructuredAnswer {
            variant,
            reasoning_text,
            pose_text,
            full_text,
        })
    }

    pub fn render_instruction<R: Rng>(&self, rng: &mut R) -> &str {
        &self.instructions[rng.gen_range(0..self.instructions.len())]
    }
}

/// Loads and validates a bank file, reporting coverage against `cmap`.
pub fn load_template_bank(path: &Path, cmap: &CategoryMap) -> Result<(TemplateBank, CoverageReport), TemplateError> {
    let bank = TemplateBank::from_json(&fs::read_to_string(path)?)?;
    bank.validate()?;
    let report = bank.coverage(cmap)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok((bank, report))
}

/// Free-form lint findings on a bank: duplicates and unreviewed entries.
pub fn lint_bank(bank: &TemplateBank) -> Vec<String> {
    let mut findings = Vec::new();
    if let Err(e) = bank.validate() {
        findings.push(e.to_string());
    }
    for (cat, list) in &bank.reasoning {
        for (i, t) in list.iter().enumerate() {
            if list[..i].iter().any(|o| o.text.trim() == t.text.trim()) {
                findings.push(format!("{cat}: template {i} duplicates an earlier one"));
            }
            if !t.reviewed {
                findings.push(format!("{cat}: template {i} is unreviewed"));
            }
            if let Some(s) = duplicate_sentence(&t.text) {
                findings.push(format!("{cat}: template {i} repeats the sentence {s:?}"));
            }
        }
    }
    let mut seen = Vec::new();
    for (i, s) in bank.instructions.iter().enumerate() {
        if seen.contains(&s.trim()) {
            findings.push(format!("instruction {i} duplicates an earlier one"));
        }
        seen.push(s.trim());
    }
    findings
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split_inclusive(['.', '!', '?']).map(str::trim).filter(|s| !s.is_empty())
}

fn duplicate_sentence(text: &str) -> Option<String> {
    let all: Vec<&str> = sentences(text).collect();
    all.iter()
        .enumerate()
        .find(|(i, s)| all[..*i].contains(s))
        .map(|(_, s)| s.to_string())
}

/// Per-category outcome of a template authoring run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthoringStatus {
    Refined,
    /// Drafts exist but the refine pass failed.
    DraftOnly { error: String },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub category: String,
    pub template_index: usize,
    pub text: String,
    pub checks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthoringOutcome {
    pub bank: TemplateBank,
    pub status: BTreeMap<String, AuthoringStatus>,
    pub checklist: Vec<ChecklistItem>,
}

/// Prompt for the first authoring pass.
pub fn draft_prompt(category: &str, count: usize) -> String {
    format!(
        "You write short reasoning passages for a robot that must grasp objects with a two-finger \
parallel gripper from a top-down camera image. Write {count} different passages for objects of the \
category \"{category}\". Each passage describes the typical shape and structure of such an object \
and states a general grasping strategy for it. Do not mention numbers or coordinates. \
Put each passage on its own line starting with \"- \"."
    )
}

/// Instruction used by the refine pass.
pub const REFINE_INSTRUCTION: &str = "Refine the following passages. Remove redundant or repeated \
sentences and any sentence that is irrelevant to the object's shape or to how it should be grasped. \
Keep the same number of passages and the same \"- \" line format.";

fn refine_prompt(category: &str, drafts: &[String]) -> String {
    let body: String = drafts.iter().map(|d| format!("- {d}\n")).collect();
    format!("{REFINE_INSTRUCTION}\nCategory: \"{category}\".\n{body}")
}

fn parse_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- ").or_else(|| l.trim().strip_prefix("* ")))
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

fn ask(client: &dyn ModelClient, prompt: String) -> Result<String, ClientError> {
    client.complete(&ChatRequest::new(vec![ChatMessage::user(prompt)]))
}

/// Drafts and refines reasoning templates per category with a chat model.
/// Everything produced is unreviewed; existing templates are kept as they
/// are. A failing category keeps whatever was produced before the failure.
pub fn author_templates(
    client: &dyn ModelClient,
    categories: &[String],
    existing: &TemplateBank,
    per_category: usize,
) -> AuthoringOutcome {
    let mut bank = existing.clone();
    let mut status = BTreeMap::new();
    let mut checklist = Vec::new();
    for category in categories {
        let drafts = match ask(client, draft_prompt(category, per_category)).map(|r| parse_list(&r)) {
            Ok(d) if !d.is_empty() => d,
            Ok(_) => {
                status.insert(category.clone(), AuthoringStatus::Failed { error: "empty draft reply".into() });
                continue;
            }
            Err(e) => {
                status.insert(category.clone(), AuthoringStatus::Failed { error: e.to_string() });
                continue;
            }
        };
        let (texts, st) = match ask(client, refine_prompt(category, &drafts)).map(|r| parse_list(&r)) {
            Ok(refined) if !refined.is_empty() => (refined, AuthoringStatus::Refined),
            Ok(_) => (drafts, AuthoringStatus::DraftOnly { error: "empty refine reply".into() }),
            Err(e) => (drafts, AuthoringStatus::DraftOnly { error: e.to_string() }),
        };
        let list = bank.reasoning.entry(category.clone()).or_default();
        for text in texts {
            let mut checks = vec![
                "describes the shape of the object correctly".to_string(),
                "grasping strategy is physically sensible".to_string(),
                "no redundant or irrelevant sentences".to_string(),
            ];
            if parse_pose(&text).pose.is_some() {
                checks.push("REMOVE numeric triple: it would be read as a pose".to_string());
            }
            checklist.push(ChecklistItem {
                category: category.clone(),
                template_index: list.len(),
                text: text.clone(),
                checks,
            });
            list.push(ReasoningTemplate { text, reviewed: false });
        }
        status.insert(category.clone(), st);
    }
    AuthoringOutcome { bank, status, checklist }
}
