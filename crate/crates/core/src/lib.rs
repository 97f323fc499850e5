//! Grasp geometry, Cornell ingestion, augmentation, answer templates, output
//! parsing and fold-based evaluation for language-model grasp predictors.

pub mod augment;
pub mod client;
pub mod cornell;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod parser;
pub mod session;
pub mod templates;
pub mod training;

pub use geometry::{
    angle_difference, pose_to_rect, rect_iou, rect_to_pose, rectangle_metric, wrap_angle, GraspEvalOutcome,
    GraspPose, GraspRectangle, MetricThresholds, Point,
};
pub use parser::{parse_pose, ParsedOutput};
pub use templates::{render_pose_text, AnswerVariant, TemplateBank};
