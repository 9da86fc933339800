//! Two-stage knowledge generation.
//!
//! The initial stage prompts once per instance with the six manual
//! demonstrations. The diversification stage repeats `t_statements` times
//! per instance, each time with one demonstration drawn from every other
//! cluster of the initial triplets.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterError, ClusterModel, DemoSampler, KnowledgeTriplet, TripletPool};
use crate::config::GenerationConfig;
use crate::dataset::Dataset;
use crate::jsonl::{self, JsonlError};
use crate::llm::{BackendError, CompletionBackend, CompletionRequest};
use crate::pool::map_bounded;
use crate::prompting::{concat_captions, manual_demonstrations, render_kgen_prompt, Demonstration, PromptError};

#[derive(Debug, thiserror::Error)]
pub enum KgenError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("question {0} has no captions attached")]
    MissingCaptions(u64),
    #[error("prompt for question {question_id}: {source}")]
    Prompt {
        question_id: u64,
        #[source]
        source: PromptError,
    },
    #[error("backend failed for question {question_id} draw {draw_index}: {source}")]
    Backend {
        question_id: u64,
        draw_index: usize,
        #[source]
        source: BackendError,
    },
    #[error("pool does not match the dataset: {0}")]
    PoolDatasetMismatch(String),
    #[error("no demonstrations available for question {0} (every other cluster is empty)")]
    NoDemonstrations(u64),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Diversified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSet {
    pub question_id: u64,
    pub stage: Stage,
    /// One entry per draw; failed draws hold an empty string.
    pub statements: Vec<String>,
}

impl KnowledgeSet {
    /// Statements that parsed to something non-empty, in draw order.
    pub fn usable(&self) -> Vec<&str> {
        self.statements
            .iter()
            .map(String::as_str)
            .filter(|s| !s.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub question_id: u64,
    pub draw_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureReport {
    pub failed: Vec<Failure>,
}

impl FailureReport {
    pub fn count(&self) -> usize {
        self.failed.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialOutput {
    pub pool: TripletPool,
    pub failures: FailureReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversifyOutput {
    pub sets: Vec<KnowledgeSet>,
    pub failures: FailureReport,
    /// Statements that repeat an earlier statement of the same set.
    pub duplicates: usize,
}

const ECHO_MARKERS: [&str; 3] = ["\nContext:", "\nQuestion:", "\nKnowledge:"];

/// Trims the completion and cuts it where the model starts echoing the
/// template.
pub fn parse_completion(raw: &str) -> String {
    let trimmed = raw.trim();
    let cut = ECHO_MARKERS
        .iter()
        .filter_map(|m| trimmed.find(m))
        .min()
        .unwrap_or(trimmed.len());
    trimmed[..cut].trim().to_string()
}

fn contexts(dataset: &Dataset) -> Result<Vec<String>, KgenError> {
    dataset
        .instances
        .iter()
        .map(|inst| match concat_captions(&inst.captions) {
            Ok(c) => Ok(c),
            Err(PromptError::EmptyCaptionList) => Err(KgenError::MissingCaptions(inst.question_id)),
            Err(source) => Err(KgenError::Prompt {
                question_id: inst.question_id,
                source,
            }),
        })
        .collect()
}

struct Job {
    question_id: u64,
    draw_index: usize,
    request: CompletionRequest,
}

fn run_jobs(
    jobs: &[Job],
    workers: usize,
    backend: &dyn CompletionBackend,
) -> Result<Vec<String>, KgenError> {
    map_bounded(jobs, workers, |_, job| {
        backend
            .complete(&job.request)
            .map(|r| parse_completion(&r.text))
            .map_err(|source| KgenError::Backend {
                question_id: job.question_id,
                draw_index: job.draw_index,
                source,
            })
    })
    .into_iter()
    .collect()
}

fn kgen_request(
    demos: &[Demonstration],
    context: &str,
    question: &str,
    question_id: u64,
    config: &GenerationConfig,
    seed_hint: Option<u64>,
) -> Result<CompletionRequest, KgenError> {
    let prompt = render_kgen_prompt(demos, context, question)
        .map_err(|source| KgenError::Prompt { question_id, source })?;
    let mut request = CompletionRequest::new(prompt.text, config.max_tokens, config.temperature)
        .with_stop(config.stop_sequences.clone());
    request.seed_hint = seed_hint;
    Ok(request)
}

/// One statement per instance from the manual demonstrations.
pub fn generate_initial(
    dataset: &Dataset,
    config: &GenerationConfig,
    backend: &dyn CompletionBackend,
) -> Result<InitialOutput, KgenError> {
    config.validate().map_err(KgenError::InvalidConfig)?;
    let contexts = contexts(dataset)?;
    let demos = manual_demonstrations();
    let jobs = dataset
        .instances
        .iter()
        .zip(&contexts)
        .map(|(inst, context)| {
            Ok(Job {
                question_id: inst.question_id,
                draw_index: 0,
                request: kgen_request(demos, context, &inst.question, inst.question_id, config, None)?,
            })
        })
        .collect::<Result<Vec<_>, KgenError>>()?;
    let statements = run_jobs(&jobs, config.workers, backend)?;

    let mut failures = FailureReport::default();
    let triplets = dataset
        .instances
        .iter()
        .zip(contexts)
        .zip(statements)
        .map(|((inst, context), knowledge)| {
            if knowledge.is_empty() {
                failures.failed.push(Failure {
                    question_id: inst.question_id,
                    draw_index: 0,
                });
            }
            KnowledgeTriplet {
                question_id: inst.question_id,
                context,
                question: inst.question.clone(),
                knowledge,
            }
        })
        .collect();
    Ok(InitialOutput {
        pool: TripletPool::new(triplets),
        failures,
    })
}

/// Initial-stage output viewed as knowledge sets of one statement each.
pub fn initial_sets(pool: &TripletPool) -> Vec<KnowledgeSet> {
    pool.triplets
        .iter()
        .map(|t| KnowledgeSet {
            question_id: t.question_id,
            stage: Stage::Initial,
            statements: vec![t.knowledge.clone()],
        })
        .collect()
}

fn check_alignment(dataset: &Dataset, pool: &TripletPool) -> Result<(), KgenError> {
    if dataset.len() != pool.len() {
        return Err(KgenError::PoolDatasetMismatch(format!(
            "{} instances vs {} triplets",
            dataset.len(),
            pool.len()
        )));
    }
    for (i, (inst, t)) in dataset.instances.iter().zip(&pool.triplets).enumerate() {
        if inst.question_id != t.question_id {
            return Err(KgenError::PoolDatasetMismatch(format!(
                "position {i}: question {} vs triplet {}",
                inst.question_id, t.question_id
            )));
        }
    }
    Ok(())
}

/// `t_statements` statements per instance from cluster-sampled demonstrations.
pub fn diversify(
    dataset: &Dataset,
    pool: &TripletPool,
    model: &ClusterModel,
    config: &GenerationConfig,
    backend: &dyn CompletionBackend,
) -> Result<DiversifyOutput, KgenError> {
    config.validate().map_err(KgenError::InvalidConfig)?;
    check_alignment(dataset, pool)?;
    let sampler = DemoSampler::for_pool(model, pool)?;
    let contexts = contexts(dataset)?;
    let t = config.t_statements;

    let mut jobs = Vec::with_capacity(dataset.len() * t);
    for (index, (inst, context)) in dataset.instances.iter().zip(&contexts).enumerate() {
        for draw_index in 0..t {
            let picks = sampler.draw(index, inst.question_id, config.seed, draw_index as u64)?;
            if picks.is_empty() {
                return Err(KgenError::NoDemonstrations(inst.question_id));
            }
            let demos: Vec<Demonstration> = picks
                .into_iter()
                .map(|i| pool.triplets[i].to_demonstration())
                .collect();
            jobs.push(Job {
                question_id: inst.question_id,
                draw_index,
                request: kgen_request(
                    &demos,
                    context,
                    &inst.question,
                    inst.question_id,
                    config,
                    Some(draw_index as u64),
                )?,
            });
        }
    }
    let statements = run_jobs(&jobs, config.workers, backend)?;

    let mut failures = FailureReport::default();
    let mut duplicates = 0;
    let sets = dataset
        .instances
        .iter()
        .zip(statements.chunks(t))
        .map(|(inst, chunk)| {
            let mut seen = BTreeSet::new();
            for (draw_index, s) in chunk.iter().enumerate() {
                if s.is_empty() {
                    failures.failed.push(Failure {
                        question_id: inst.question_id,
                        draw_index,
                    });
                } else if !seen.insert(s.as_str()) {
                    duplicates += 1;
                }
            }
            KnowledgeSet {
                question_id: inst.question_id,
                stage: Stage::Diversified,
                statements: chunk.to_vec(),
            }
        })
        .collect();
    Ok(DiversifyOutput {
        sets,
        failures,
        duplicates,
    })
}

pub fn save_knowledge(sets: &[KnowledgeSet], path: &Path) -> Result<(), JsonlError> {
    jsonl::write_lines(path, sets)
}

pub fn load_knowledge(path: &Path) -> Result<Vec<KnowledgeSet>, JsonlError> {
    Ok(jsonl::read_lines(path)?.into_iter().map(|l| l.value).collect())
}
