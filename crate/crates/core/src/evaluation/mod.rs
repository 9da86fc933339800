//! Answer scoring and human-evaluation bookkeeping.

mod annotation;
mod kappa;
mod ratings;
mod report;
mod soft_accuracy;

pub use annotation::{export_annotation_tasks, image_ref, AnnotationTask, DEFAULT_IMAGE_REF_TEMPLATE, FORBIDDEN_TASK_KEYS};
pub use kappa::{fleiss_kappa, kappa_tables, KappaError, MetricKappa};
pub use ratings::{
    aggregate_ratings, import_ratings, parse_ratings, validate_against_tasks, AggregateMode, AnnotationRecord,
    DiversityRecord, Helpfulness, Metric, RatingScores, Ratings,
};
pub use report::{evaluate_run, select_flip_cases, EvalReport, QuestionScore};
pub use soft_accuracy::vqa_soft_accuracy;

use crate::jsonl::JsonlError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground-truth answer list is empty")]
    EmptyGroundTruth,
    #[error("unknown question_id {0}")]
    UnknownQuestionId(u64),
    #[error("question {0} has no ground-truth answers")]
    MissingAnswers(u64),
    #[error("question {0} is predicted more than once")]
    DuplicatePrediction(u64),
    #[error("reports cover different question sets")]
    MismatchedQuestionSets,
    #[error("question {0} has no generated knowledge")]
    MissingKnowledge(u64),
    #[error("inconsistent statement counts: {0}")]
    InconsistentStatementCounts(String),
    #[error("line {line}: invalid {field} value {value:?}")]
    InvalidCategory {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: {message}")]
    InvariantViolation { line: usize, message: String },
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
