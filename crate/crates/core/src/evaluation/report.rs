use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{vqa_soft_accuracy, EvalError};
use crate::dataset::Dataset;
use crate::qa::{normalize_answer, AnswerPrediction};
use crate::seeding::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: u64,
    pub soft_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub num_questions: usize,
    pub mean_soft_accuracy: f64,
    /// Sorted by question_id.
    pub per_question: Vec<QuestionScore>,
}

impl EvalReport {
    pub fn from_scores(dataset_name: impl Into<String>, mut per_question: Vec<QuestionScore>) -> Self {
        per_question.sort_by_key(|q| q.question_id);
        let n = per_question.len();
        let mean = if n == 0 {
            0.0
        } else {
            per_question.iter().map(|q| q.soft_accuracy).sum::<f64>() / n as f64
        };
        EvalReport {
            dataset_name: dataset_name.into(),
            num_questions: n,
            mean_soft_accuracy: mean,
            per_question,
        }
    }
}

/// Scores each prediction against the normalized ground-truth answers.
pub fn evaluate_run(predictions: &[AnswerPrediction], dataset: &Dataset) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::PreconditionViolation("no predictions to evaluate".into()));
    }
    let mut seen = BTreeSet::new();
    let mut scores = Vec::with_capacity(predictions.len());
    for p in predictions {
        if !seen.insert(p.question_id) {
            return Err(EvalError::DuplicatePrediction(p.question_id));
        }
        let instance = dataset
            .get(p.question_id)
            .ok_or(EvalError::UnknownQuestionId(p.question_id))?;
        if instance.answers.is_empty() {
            return Err(EvalError::MissingAnswers(p.question_id));
        }
        let truth: Vec<String> = instance.answers.iter().map(|a| normalize_answer(&a.answer)).collect();
        scores.push(QuestionScore {
            question_id: p.question_id,
            soft_accuracy: vqa_soft_accuracy(&p.normalized_answer, &truth)?,
        });
    }
    Ok(EvalReport::from_scores(dataset.name.clone(), scores))
}

/// Questions whose correctness (soft accuracy > 0) differs between the two
/// runs. At most `n` are returned, drawn without replacement with a seeded
/// generator, in ascending question_id order.
pub fn select_flip_cases(a: &EvalReport, b: &EvalReport, n: usize, seed: u64) -> Result<Vec<u64>, EvalError> {
    let scores_a: BTreeMap<u64, f64> = a.per_question.iter().map(|q| (q.question_id, q.soft_accuracy)).collect();
    let scores_b: BTreeMap<u64, f64> = b.per_question.iter().map(|q| (q.question_id, q.soft_accuracy)).collect();
    if scores_a.len() != a.per_question.len()
        || scores_b.len() != b.per_question.len()
        || !scores_a.keys().eq(scores_b.keys())
    {
        return Err(EvalError::MismatchedQuestionSets);
    }
    let flips: Vec<u64> = scores_a
        .iter()
        .filter(|&(id, &sa)| (sa > 0.0) != (scores_b[id] > 0.0))
        .map(|(&id, _)| id)
        .collect();
    if flips.len() <= n {
        return Ok(flips);
    }
    let mut rng = derive_rng("flips", &[seed]);
    let mut picked: Vec<u64> = rand::seq::index::sample(&mut rng, flips.len(), n)
        .into_iter()
        .map(|i| flips[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}
