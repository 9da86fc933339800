//! Generation and answering parameters.

use serde::{Deserialize, Serialize};

use crate::clustering::KMeansParams;
use crate::prompting::QA_INSTRUCTION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_k")]
    pub k_clusters: usize,
    #[serde(default = "default_t")]
    pub t_statements: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_stop")]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    /// Captions kept per instance. No default: it depends on the captioner.
    pub max_captions: usize,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default = "default_max_iters")]
    pub kmeans_max_iters: usize,
    /// Upper bound on in-flight backend requests.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_k() -> usize {
    8
}
fn default_t() -> usize {
    10
}
fn default_max_tokens() -> u32 {
    64
}
fn default_stop() -> Vec<String> {
    vec!["\n\n".into()]
}
fn default_restarts() -> usize {
    10
}
fn default_max_iters() -> usize {
    300
}
fn default_workers() -> usize {
    4
}

impl GenerationConfig {
    pub fn new(max_captions: usize) -> Self {
        GenerationConfig {
            temperature: default_temperature(),
            k_clusters: default_k(),
            t_statements: default_t(),
            max_tokens: default_max_tokens(),
            stop_sequences: default_stop(),
            seed: 0,
            max_captions,
            kmeans_restarts: default_restarts(),
            kmeans_max_iters: default_max_iters(),
            workers: default_workers(),
        }
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k_clusters,
            seed: self.seed,
            restarts: self.kmeans_restarts,
            max_iters: self.kmeans_max_iters,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.t_statements == 0 {
            return Err("t_statements must be at least 1".into());
        }
        if self.k_clusters == 0 {
            return Err("k_clusters must be positive".into());
        }
        if self.max_captions == 0 {
            return Err("max_captions must be positive".into());
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err("temperature must lie in [0, 2]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaConfig {
    #[serde(default = "default_instruction")]
    pub instruction: String,
    #[serde(default = "default_qa_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_qa_stop")]
    pub stop_sequences: Vec<String>,
    /// Token budget for chain-of-thought completions (knowledge + answer).
    #[serde(default = "default_cot_max_tokens")]
    pub cot_max_tokens: u32,
}

fn default_instruction() -> String {
    QA_INSTRUCTION.into()
}
fn default_qa_max_tokens() -> u32 {
    16
}
fn default_qa_stop() -> Vec<String> {
    Vec::new()
}
fn default_cot_max_tokens() -> u32 {
    128
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            instruction: default_instruction(),
            max_tokens: default_qa_max_tokens(),
            stop_sequences: default_qa_stop(),
            cot_max_tokens: default_cot_max_tokens(),
        }
    }
}
