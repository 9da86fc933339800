//! VQA question, annotation, and caption ingestion.
//!
//! Questions and annotations use the VQA-v2 JSON layout (`{"questions": [...]}`
//! and `{"annotations": [...]}`); captions come from an external captioner as
//! JSON-Lines `{question_id, captions}`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed JSON in {path} at byte {offset}: {message}")]
    MalformedJson {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("malformed JSON line {line} in {path}: {message}")]
    MalformedJsonLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate question_id {0}")]
    DuplicateQuestionId(u64),
    #[error("unknown question_id {0}")]
    UnknownQuestionId(u64),
    #[error("question {0} has an empty question text")]
    EmptyQuestion(u64),
    #[error("question {question_id} has an empty answer (answer_id {answer_id})")]
    EmptyAnswer { question_id: u64, answer_id: u64 },
    #[error("question {question_id} repeats answer_id {answer_id}")]
    DuplicateAnswerId { question_id: u64, answer_id: u64 },
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerAnnotation {
    pub answer: String,
    pub answer_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaInstance {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
    pub answers: Vec<AnswerAnnotation>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<VqaInstance>,
}

/// Question ids left without data by an attach step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestWarnings {
    pub missing: Vec<u64>,
}

impl IngestWarnings {
    pub fn count(&self) -> usize {
        self.missing.len()
    }
}

#[derive(Deserialize)]
struct QuestionsFile {
    questions: Vec<QuestionRecord>,
}

#[derive(Deserialize)]
struct QuestionRecord {
    image_id: u64,
    question: String,
    question_id: u64,
}

#[derive(Deserialize)]
struct AnnotationsFile {
    annotations: Vec<AnnotationRecord>,
}

// Official files also carry answer_confidence, answer_type, etc.; those are ignored.
#[derive(Deserialize)]
struct AnnotationRecord {
    question_id: u64,
    answers: Vec<AnswerAnnotation>,
}

#[derive(Deserialize)]
struct CaptionRecord {
    question_id: u64,
    captions: Vec<String>,
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, DatasetError> {
    serde_json::from_str(text).map_err(|e| DatasetError::MalformedJson {
        path: path.display().to_string(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

impl Dataset {
    /// Loads a questions file. Answers and captions start empty.
    pub fn load_questions(path: &Path) -> Result<Dataset, DatasetError> {
        let text = read_text(path)?;
        let file: QuestionsFile = parse_json(path, &text)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::from_questions(name, file.questions.into_iter().map(|q| (q.question_id, q.image_id, q.question)))
    }

    /// Builds a dataset from `(question_id, image_id, question)` triples.
    pub fn from_questions(
        name: impl Into<String>,
        questions: impl IntoIterator<Item = (u64, u64, String)>,
    ) -> Result<Dataset, DatasetError> {
        let mut seen = BTreeSet::new();
        let mut instances = Vec::new();
        for (question_id, image_id, question) in questions {
            if !seen.insert(question_id) {
                return Err(DatasetError::DuplicateQuestionId(question_id));
            }
            if question.trim().is_empty() {
                return Err(DatasetError::EmptyQuestion(question_id));
            }
            instances.push(VqaInstance {
                question_id,
                image_id,
                question,
                answers: Vec::new(),
                captions: Vec::new(),
            });
        }
        Ok(Dataset {
            name: name.into(),
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn index_of(&self, question_id: u64) -> Option<usize> {
        self.instances.iter().position(|i| i.question_id == question_id)
    }

    pub fn get(&self, question_id: u64) -> Option<&VqaInstance> {
        self.index_of(question_id).map(|i| &self.instances[i])
    }

    fn id_index(&self) -> HashMap<u64, usize> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.question_id, i))
            .collect()
    }

    fn missing_where(&self, pred: impl Fn(&VqaInstance) -> bool) -> IngestWarnings {
        IngestWarnings {
            missing: self
                .instances
                .iter()
                .filter(|i| pred(i))
                .map(|i| i.question_id)
                .collect(),
        }
    }

    /// Attaches ground-truth answers. Instances without an annotation keep
    /// empty answers and are listed in the returned warnings.
    pub fn load_annotations(&mut self, path: &Path) -> Result<IngestWarnings, DatasetError> {
        let text = read_text(path)?;
        let file: AnnotationsFile = parse_json(path, &text)?;
        let index = self.id_index();
        for record in file.annotations {
            let &slot = index
                .get(&record.question_id)
                .ok_or(DatasetError::UnknownQuestionId(record.question_id))?;
            let mut ids = BTreeSet::new();
            for answer in &record.answers {
                if !ids.insert(answer.answer_id) {
                    return Err(DatasetError::DuplicateAnswerId {
                        question_id: record.question_id,
                        answer_id: answer.answer_id,
                    });
                }
                if answer.answer.trim().is_empty() {
                    return Err(DatasetError::EmptyAnswer {
                        question_id: record.question_id,
                        answer_id: answer.answer_id,
                    });
                }
            }
            self.instances[slot].answers = record.answers;
        }
        Ok(self.missing_where(|i| i.answers.is_empty()))
    }

    /// Attaches the first `max_captions` captions of each record, in record
    /// order.
    pub fn attach_captions(
        &mut self,
        path: &Path,
        max_captions: usize,
    ) -> Result<IngestWarnings, DatasetError> {
        if max_captions == 0 {
            return Err(DatasetError::PreconditionViolation(
                "max_captions must be positive".into(),
            ));
        }
        let text = read_text(path)?;
        let records = jsonl::parse_lines::<CaptionRecord>(&text).map_err(|e| match e {
            JsonlError::MalformedLine { line, message } => DatasetError::MalformedJsonLine {
                path: path.display().to_string(),
                line,
                message,
            },
            JsonlError::Io { path, source } => DatasetError::Io {
                path,
                message: source.to_string(),
            },
        })?;
        let index = self.id_index();
        for record in records {
            let record = record.value;
            let &slot = index
                .get(&record.question_id)
                .ok_or(DatasetError::UnknownQuestionId(record.question_id))?;
            self.instances[slot].captions = record.captions.into_iter().take(max_captions).collect();
        }
        Ok(self.missing_where(|i| i.captions.is_empty()))
    }
}
