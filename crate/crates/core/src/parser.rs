//! Extraction of the grasp pose and the reasoning text from free-form model
//! replies.
//!
//! Candidates are numeric triples written as `{x, y, t}`, `[x, y, t]`,
//! `(x, y, t)` or labelled `x = .., y = .., theta = ..`. The last candidate
//! that passes the range gates wins.

use std::f64::consts::PI;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::GraspPose;
use crate::templates::{canonical_theta, AnswerVariant, LEAD_IN, NO_REASONING_B_SUFFIX, NO_REASONING_B_PREFIX};

/// Slack around `[0, 1]` accepted for normalized coordinates before
/// clamping.
pub const COORD_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParseOptions {
    /// Reinterpret third values outside `[-π, π]` (up to 360) as degrees.
    pub allow_degrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub pose: Option<GraspPose>,
    /// Text before the matched pose, trailing whitespace removed.
    pub reasoning_text: String,
    /// Character offsets `[start, end)` of the matched triple.
    pub matched_span: Option<(usize, usize)>,
    pub diagnostics: Vec<String>,
}

pub const NO_POSE_FOUND: &str = "no_pose_found";

const NUM: &str = r"[-+−]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?";

fn bracketed() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let sep = r"(?:\s*[,;]\s*|\s+)";
        Regex::new(&format!(
            r"[\{{\[\(]\s*({NUM}){sep}({NUM}){sep}({NUM})\s*[\}}\]\)]"
        ))
        .expect("valid regex")
    })
}

fn labelled() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let eq = r"\s*(?:=|:)\s*";
        let sep = r"[\s,;]*(?:and\s+)?";
        Regex::new(&format!(
            r"(?i)\bx{eq}({NUM}){sep}\by{eq}({NUM}){sep}(?:\btheta|θ|\bangle|\bt){eq}({NUM})"
        ))
        .expect("valid regex")
    })
}

fn parse_num(s: &str) -> Option<f64> {
    s.replace('\u{2212}', "-").parse::<f64>().ok().filter(|v| v.is_finite())
}

struct Candidate {
    start: usize,
    end: usize,
    values: [Option<f64>; 3],
}

fn candidates(text: &str) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    for re in [bracketed(), labelled()] {
        for caps in re.captures_iter(text) {
            let m = caps.get(0).expect("whole match");
            out.push(Candidate {
                start: m.start(),
                end: m.end(),
                values: [1, 2, 3].map(|i| parse_num(&caps[i])),
            });
        }
    }
    out.sort_by_key(|c| (c.start, c.end));
    out
}

/// Applies the coordinate and angle gates, returning a pose or the reason
/// for rejection.
fn gate(values: [Option<f64>; 3], opts: &ParseOptions) -> Result<GraspPose, String> {
    let [Some(x), Some(y), Some(t)] = values else {
        return Err("non-finite value".into());
    };
    let coord = |name: &str, v: f64| {
        if (-COORD_SLACK..=1.0 + COORD_SLACK).contains(&v) {
            Ok(v.clamp(0.0, 1.0))
        } else {
            Err(format!("{name} = {v} outside [{}, {}]", -COORD_SLACK, 1.0 + COORD_SLACK))
        }
    };
    let x = coord("x", x)?;
    let y = coord("y", y)?;
    let theta = if (-PI..=PI).contains(&t) {
        t
    } else if opts.allow_degrees && (-360.0..=360.0).contains(&t) {
        t.to_radians()
    } else {
        return Err(format!("theta = {t} outside [-pi, pi]"));
    };
    Ok(GraspPose {
        x,
        y,
        theta: canonical_theta(theta),
    })
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

pub fn parse_pose(text: &str) -> ParsedOutput {
    parse_pose_with(text, &ParseOptions::default())
}

/// Selects the last candidate triple that passes the gates. Never fails;
/// an absent pose comes with the `no_pose_found` diagnostic.
pub fn parse_pose_with(text: &str, opts: &ParseOptions) -> ParsedOutput {
    let mut diagnostics = Vec::new();
    for cand in candidates(text).iter().rev() {
        match gate(cand.values, opts) {
            Ok(pose) => {
                return ParsedOutput {
                    pose: Some(pose),
                    reasoning_text: text[..cand.start].trim_end().to_string(),
                    matched_span: Some((char_offset(text, cand.start), char_offset(text, cand.end))),
                    diagnostics,
                }
            }
            Err(reason) => diagnostics.push(format!(
                "rejected candidate at {}: {reason}",
                char_offset(text, cand.start)
            )),
        }
    }
    diagnostics.push(NO_POSE_FOUND.to_string());
    ParsedOutput {
        pose: None,
        reasoning_text: text.trim_end().to_string(),
        matched_span: None,
        diagnostics,
    }
}

/// Reasoning with the fixed lead-in before the pose removed.
pub fn strip_lead_in(reasoning: &str) -> &str {
    let lead = LEAD_IN.trim();
    reasoning.strip_suffix(lead).unwrap_or(reasoning).trim_end()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub variant: AnswerVariant,
    pub rules: Vec<RuleResult>,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.rules.iter().all(|r| r.passed)
    }

    pub fn rule(&self, name: &str) -> Option<&RuleResult> {
        self.rules.iter().find(|r| r.rule == name)
    }
}

fn rule(rules: &mut Vec<RuleResult>, name: &str, passed: bool, detail: impl Into<String>) {
    rules.push(RuleResult {
        rule: name.to_string(),
        passed,
        detail: detail.into(),
    });
}

/// Checks the answer layout expected for `variant`.
pub fn validate_answer(text: &str, variant: AnswerVariant) -> StructureReport {
    let parsed = parse_pose(text);
    let mut rules = Vec::new();
    rule(
        &mut rules,
        "pose_present",
        parsed.pose.is_some(),
        parsed.diagnostics.join("; "),
    );
    let (before, after) = match parsed.matched_span {
        Some((s, e)) => {
            let chars: Vec<char> = text.chars().collect();
            (
                chars[..s].iter().collect::<String>(),
                chars[e..].iter().collect::<String>(),
            )
        }
        None => (text.to_string(), String::new()),
    };
    match variant {
        AnswerVariant::Full => {
            let reasoning = strip_lead_in(before.trim_end());
            rule(
                &mut rules,
                "reasoning_non_empty",
                reasoning.chars().any(char::is_alphabetic),
                format!("{} characters of reasoning", reasoning.chars().count()),
            );
            rule(
                &mut rules,
                "pose_last",
                after.trim().trim_end_matches('.').is_empty(),
                "nothing but punctuation may follow the pose",
            );
        }
        AnswerVariant::NoReasoningA => {
            let outside = format!("{before}{after}");
            rule(
                &mut rules,
                "pose_only",
                !outside.chars().any(char::is_alphabetic),
                "no text outside the pose braces",
            );
        }
        AnswerVariant::NoReasoningB => {
            let ok = before.trim_end().ends_with(NO_REASONING_B_PREFIX.trim_end())
                && after.starts_with(NO_REASONING_B_SUFFIX);
            rule(&mut rules, "wrapper_present", ok, "fixed explanatory prompt around the pose");
        }
    }
    StructureReport { variant, rules }
}
