//! Generate-and-answer pipeline for knowledge-based visual question answering.
//!
//! Captions and a question go in; an LLM produces background knowledge in two
//! stages (one statement from fixed manual demonstrations, then several more
//! from demonstrations sampled across K-means clusters of the first-stage
//! output), and the knowledge is folded into a QA prompt. The evaluation
//! module scores answers with VQA soft accuracy and handles the human rating
//! side (blinded task export, avg/max aggregation, Fleiss kappa).
//!
//! Every model call goes through the [`llm`] traits, so a full run can be
//! replayed offline from a scripted transcript.

pub mod clustering;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod jsonl;
pub mod knowledge_gen;
pub mod llm;
pub mod manifest;
pub mod pool;
pub mod prompting;
pub mod qa;
pub mod seeding;

#[cfg(feature = "cli")]
pub mod cli;

pub use clustering::{ClusterModel, KMeansParams, KnowledgeTriplet, TripletPool};
pub use config::GenerationConfig;
pub use dataset::{AnswerAnnotation, Dataset, VqaInstance};
pub use knowledge_gen::{KnowledgeSet, Stage};
pub use qa::{AnswerPrediction, PredictionMode};
