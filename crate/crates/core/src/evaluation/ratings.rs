//! Human ratings of knowledge statements: import and avg/max aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotation::AnnotationTask;
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Helpfulness {
    Helpful,
    Neutral,
    Harmful,
}

impl Helpfulness {
    pub fn score(self) -> f64 {
        match self {
            Helpfulness::Helpful => 1.0,
            Helpfulness::Neutral => 0.5,
            Helpfulness::Harmful => 0.0,
        }
    }

    pub(crate) fn category_index(self) -> usize {
        match self {
            Helpfulness::Helpful => 0,
            Helpfulness::Neutral => 1,
            Helpfulness::Harmful => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "helpful" => Some(Helpfulness::Helpful),
            "neutral" => Some(Helpfulness::Neutral),
            "harmful" => Some(Helpfulness::Harmful),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Grammatical,
    Relevant,
    Factual,
    Helpfulness,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Grammatical, Metric::Relevant, Metric::Factual, Metric::Helpfulness];

    pub(crate) fn categories(self) -> usize {
        match self {
            Metric::Helpfulness => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub question_id: u64,
    pub statement_index: usize,
    pub annotator_id: String,
    pub grammatical: bool,
    pub relevant: bool,
    pub factual: bool,
    pub helpfulness: Helpfulness,
}

impl AnnotationRecord {
    fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Grammatical => self.grammatical as u8 as f64,
            Metric::Relevant => self.relevant as u8 as f64,
            Metric::Factual => self.factual as u8 as f64,
            Metric::Helpfulness => self.helpfulness.score(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityRecord {
    pub question_id: u64,
    pub annotator_id: String,
    pub distinct_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ratings {
    pub annotations: Vec<AnnotationRecord>,
    pub diversity: Vec<DiversityRecord>,
}

impl Ratings {
    pub fn mean_diversity(&self) -> Option<f64> {
        if self.diversity.is_empty() {
            return None;
        }
        Some(self.diversity.iter().map(|d| d.distinct_count as f64).sum::<f64>() / self.diversity.len() as f64)
    }

    /// JSON-Lines in the same layout [`parse_ratings`] reads.
    pub fn to_jsonl(&self) -> String {
        let mut out = crate::jsonl::to_string(&self.annotations);
        out.push_str(&crate::jsonl::to_string(&self.diversity));
        out
    }
}

fn violation(line: usize, message: impl Into<String>) -> EvalError {
    EvalError::InvariantViolation {
        line,
        message: message.into(),
    }
}

/// Parses the ratings file: annotation lines and diversity lines may be
/// interleaved.
pub fn parse_ratings(text: &str) -> Result<Ratings, EvalError> {
    let mut ratings = Ratings::default();
    let mut diversity_lines = Vec::new();
    let mut seen = BTreeSet::new();
    let lines = crate::jsonl::parse_lines::<serde_json::Value>(text)?;
    for line in lines {
        let number = line.number;
        let malformed = |e: serde_json::Error| {
            EvalError::Jsonl(crate::jsonl::JsonlError::MalformedLine {
                line: number,
                message: e.to_string(),
            })
        };
        let obj = line
            .value
            .as_object()
            .ok_or_else(|| violation(number, "expected a JSON object"))?;
        if obj.contains_key("distinct_count") {
            let record: DiversityRecord = serde_json::from_value(line.value).map_err(malformed)?;
            if record.distinct_count == 0 {
                return Err(violation(number, "distinct_count must be at least 1"));
            }
            diversity_lines.push(number);
            ratings.diversity.push(record);
        } else {
            if let Some(h) = obj.get("helpfulness").and_then(|v| v.as_str()) {
                if Helpfulness::parse(h).is_none() {
                    return Err(EvalError::InvalidCategory {
                        line: number,
                        field: "helpfulness",
                        value: h.to_string(),
                    });
                }
            }
            let record: AnnotationRecord = serde_json::from_value(line.value).map_err(malformed)?;
            if !seen.insert((record.question_id, record.annotator_id.clone(), record.statement_index)) {
                return Err(violation(
                    number,
                    format!(
                        "duplicate rating for question {} statement {} by {}",
                        record.question_id, record.statement_index, record.annotator_id
                    ),
                ));
            }
            ratings.annotations.push(record);
        }
    }
    let mut shown: BTreeMap<(u64, &str), usize> = BTreeMap::new();
    for r in &ratings.annotations {
        *shown.entry((r.question_id, r.annotator_id.as_str())).or_default() += 1;
    }
    for (d, &number) in ratings.diversity.iter().zip(&diversity_lines) {
        let rated = shown.get(&(d.question_id, d.annotator_id.as_str())).copied().unwrap_or(0);
        if d.distinct_count > rated {
            return Err(violation(
                number,
                format!(
                    "distinct_count {} exceeds the {} statements rated for question {} by {}",
                    d.distinct_count, rated, d.question_id, d.annotator_id
                ),
            ));
        }
    }
    Ok(ratings)
}

pub fn import_ratings(path: &Path) -> Result<Ratings, EvalError> {
    let text = std::fs::read_to_string(path)?;
    parse_ratings(&text)
}

/// Checks statement indices and diversity counts against the task file the
/// annotators were given.
pub fn validate_against_tasks(ratings: &Ratings, tasks: &[AnnotationTask]) -> Result<(), EvalError> {
    let shown: BTreeMap<u64, usize> = tasks.iter().map(|t| (t.question_id, t.statements.len())).collect();
    for r in &ratings.annotations {
        let &n = shown.get(&r.question_id).ok_or(EvalError::UnknownQuestionId(r.question_id))?;
        if r.statement_index >= n {
            return Err(EvalError::InconsistentStatementCounts(format!(
                "question {} shows {n} statements but statement_index {} was rated",
                r.question_id, r.statement_index
            )));
        }
    }
    for d in &ratings.diversity {
        let &n = shown.get(&d.question_id).ok_or(EvalError::UnknownQuestionId(d.question_id))?;
        if d.distinct_count == 0 || d.distinct_count > n {
            return Err(EvalError::InconsistentStatementCounts(format!(
                "question {} shows {n} statements but distinct_count is {}",
                d.question_id, d.distinct_count
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    Avg,
    Max,
}

/// Percentages (0-100) per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingScores {
    pub mode: AggregateMode,
    pub grammatical: f64,
    pub relevant: f64,
    pub factual: f64,
    pub helpfulness: f64,
}

impl RatingScores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Grammatical => self.grammatical,
            Metric::Relevant => self.relevant,
            Metric::Factual => self.factual,
            Metric::Helpfulness => self.helpfulness,
        }
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Reduces each (question, annotator) group over its statements by mean or
/// max, averages over questions, then over annotators, and scales to 100.
pub fn aggregate_ratings(records: &[AnnotationRecord], mode: AggregateMode) -> Result<RatingScores, EvalError> {
    if records.is_empty() {
        return Err(EvalError::PreconditionViolation("no ratings to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, BTreeMap<u64, Vec<&AnnotationRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.annotator_id.as_str())
            .or_default()
            .entry(r.question_id)
            .or_default()
            .push(r);
    }
    let mut per_question_count: BTreeMap<u64, usize> = BTreeMap::new();
    for (annotator, questions) in &mut groups {
        for (&question_id, statements) in questions.iter_mut() {
            statements.sort_by_key(|r| r.statement_index);
            let contiguous = statements.iter().enumerate().all(|(i, r)| r.statement_index == i);
            if !contiguous {
                return Err(EvalError::InconsistentStatementCounts(format!(
                    "{annotator} rated statements {:?} of question {question_id}",
                    statements.iter().map(|r| r.statement_index).collect::<Vec<_>>()
                )));
            }
            let expected = *per_question_count.entry(question_id).or_insert(statements.len());
            if expected != statements.len() {
                return Err(EvalError::InconsistentStatementCounts(format!(
                    "question {question_id}: {annotator} rated {} statements, another annotator rated {expected}",
                    statements.len()
                )));
            }
        }
    }
    let score = |metric: Metric| -> f64 {
        let per_annotator = groups.values().map(|questions| {
            mean(questions.values().map(|statements| {
                let values = statements.iter().map(|r| r.score(metric));
                match mode {
                    AggregateMode::Avg => mean(values),
                    AggregateMode::Max => values.fold(f64::NEG_INFINITY, f64::max),
                }
            }))
        });
        100.0 * mean(per_annotator)
    };
    Ok(RatingScores {
        mode,
        grammatical: score(Metric::Grammatical),
        relevant: score(Metric::Relevant),
        factual: score(Metric::Factual),
        helpfulness: score(Metric::Helpfulness),
    })
}
