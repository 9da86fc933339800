//! Answer prediction with generated knowledge, answer normalization, and
//! fusion-in-decoder context export.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::QaConfig;
use crate::dataset::VqaInstance;
use crate::llm::{BackendError, CompletionBackend, CompletionRequest};
use crate::prompting::{concat_captions, render_cot_prompt, render_qa_prompt, Demonstration, PromptError};

#[derive(Debug, thiserror::Error)]
pub enum QaError {
    #[error("question {question_id}: asked for {requested} knowledge statements, {available} available")]
    NotEnoughKnowledge {
        question_id: u64,
        requested: usize,
        available: usize,
    },
    #[error("question {question_id}: {source}")]
    Prompt {
        question_id: u64,
        #[source]
        source: PromptError,
    },
    #[error("question {question_id}: {source}")]
    Backend {
        question_id: u64,
        #[source]
        source: BackendError,
    },
    #[error("question {question_id}: no \"Answer:\" in completion")]
    ParseFailure { question_id: u64 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    WithKnowledge,
    WithoutKnowledge,
    Cot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub question_id: u64,
    pub raw_answer: String,
    pub normalized_answer: String,
    pub knowledge_used: usize,
    pub mode: PredictionMode,
}

const NUMBER_WORDS: [(&str, &str); 11] = [
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
];

fn strip_digit_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    chars
        .iter()
        .enumerate()
        .filter(|&(i, &c)| {
            !(c == ','
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(char::is_ascii_digit))
        })
        .map(|(_, &c)| c)
        .collect()
}

fn normalize_pass(raw: &str) -> String {
    let lowered = strip_digit_commas(&raw.to_lowercase());
    let trimmed = lowered.trim_end_matches(|c: char| c == '.' || c.is_whitespace());
    trimmed
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(|t| {
            NUMBER_WORDS
                .iter()
                .find(|(w, _)| *w == t)
                .map_or(t, |(_, d)| d)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercases, drops a terminal period, removes standalone articles, maps
/// number words zero..ten to digits, collapses whitespace and removes commas
/// between digits. Repeats until stable, so the result is idempotent.
pub fn normalize_answer(raw: &str) -> String {
    let mut current = normalize_pass(raw);
    loop {
        let next = normalize_pass(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// First non-empty line of the completion, trimmed.
fn first_line(text: &str) -> String {
    text.trim().lines().next().unwrap_or("").trim().to_string()
}

fn context_of(instance: &VqaInstance) -> Result<String, QaError> {
    concat_captions(&instance.captions).map_err(|source| QaError::Prompt {
        question_id: instance.question_id,
        source,
    })
}

/// Knowledge actually placed in the prompt: the first `num_knowledge`
/// entries, minus failed (empty) generations.
pub fn select_knowledge(
    question_id: u64,
    knowledge: &[String],
    num_knowledge: usize,
) -> Result<Vec<&str>, QaError> {
    if num_knowledge > knowledge.len() {
        return Err(QaError::NotEnoughKnowledge {
            question_id,
            requested: num_knowledge,
            available: knowledge.len(),
        });
    }
    Ok(knowledge[..num_knowledge]
        .iter()
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .collect())
}

pub fn predict_answer(
    instance: &VqaInstance,
    knowledge: &[String],
    num_knowledge: usize,
    backend: &dyn CompletionBackend,
    config: &QaConfig,
) -> Result<AnswerPrediction, QaError> {
    let question_id = instance.question_id;
    let selected = select_knowledge(question_id, knowledge, num_knowledge)?;
    let context = context_of(instance)?;
    let prompt = render_qa_prompt(&selected, &context, &instance.question, &config.instruction)
        .map_err(|source| QaError::Prompt { question_id, source })?;
    let request = CompletionRequest::new(prompt.text, config.max_tokens, 0.0)
        .with_stop(config.stop_sequences.clone());
    let completion = backend
        .complete(&request)
        .map_err(|source| QaError::Backend { question_id, source })?;
    let raw_answer = first_line(&completion.text);
    Ok(AnswerPrediction {
        question_id,
        normalized_answer: normalize_answer(&raw_answer),
        raw_answer,
        knowledge_used: selected.len(),
        mode: if num_knowledge == 0 {
            PredictionMode::WithoutKnowledge
        } else {
            PredictionMode::WithKnowledge
        },
    })
}

/// Chain-of-thought: the model writes knowledge and then `Answer: ...`.
pub fn predict_cot(
    instance: &VqaInstance,
    demos: &[Demonstration],
    backend: &dyn CompletionBackend,
    config: &QaConfig,
) -> Result<AnswerPrediction, QaError> {
    let question_id = instance.question_id;
    let context = context_of(instance)?;
    let prompt = render_cot_prompt(demos, &context, &instance.question)
        .map_err(|source| QaError::Prompt { question_id, source })?;
    // a blank line would cut the answer off, so only stop at the next block
    let request = CompletionRequest::new(prompt.text, config.cot_max_tokens, 0.0)
        .with_stop(vec!["\n\nContext:".into()]);
    let completion = backend
        .complete(&request)
        .map_err(|source| QaError::Backend { question_id, source })?;
    let (_, after) = completion
        .text
        .rsplit_once("Answer:")
        .ok_or(QaError::ParseFailure { question_id })?;
    let raw_answer = first_line(after);
    Ok(AnswerPrediction {
        question_id,
        normalized_answer: normalize_answer(&raw_answer),
        raw_answer,
        knowledge_used: 0,
        mode: PredictionMode::Cot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidHeader {
    pub length_penalty: f64,
    pub reader_hint: String,
}

impl Default for FidHeader {
    fn default() -> Self {
        FidHeader {
            length_penalty: -1.0,
            reader_hint: "encode each context with the question independently and fuse in the decoder; decode with length_penalty".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidContextRecord {
    pub question_id: u64,
    pub question: String,
    pub contexts: Vec<String>,
}

/// One context per caption followed by one per selected statement.
pub fn fid_record(
    instance: &VqaInstance,
    knowledge: &[String],
    num_knowledge: usize,
) -> Result<FidContextRecord, QaError> {
    let selected = select_knowledge(instance.question_id, knowledge, num_knowledge)?;
    let contexts: Vec<String> = instance
        .captions
        .iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .chain(selected.into_iter().map(str::to_string))
        .collect();
    if contexts.is_empty() {
        return Err(QaError::Prompt {
            question_id: instance.question_id,
            source: PromptError::EmptyCaptionList,
        });
    }
    Ok(FidContextRecord {
        question_id: instance.question_id,
        question: instance.question.clone(),
        contexts,
    })
}

/// FiD export file: a header line, then one record per line.
pub struct FidWriter<W: Write> {
    out: W,
}

impl FidWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: &FidHeader) -> Result<Self, QaError> {
        FidWriter::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> FidWriter<W> {
    pub fn new(mut out: W, header: &FidHeader) -> Result<Self, QaError> {
        writeln!(out, "{}", serde_json::to_string(header).expect("header serializes"))?;
        Ok(FidWriter { out })
    }

    pub fn export(
        &mut self,
        instance: &VqaInstance,
        knowledge: &[String],
        num_knowledge: usize,
    ) -> Result<FidContextRecord, QaError> {
        let record = fid_record(instance, knowledge, num_knowledge)?;
        writeln!(self.out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        Ok(record)
    }

    pub fn finish(mut self) -> Result<W, QaError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::FnBackend;
    use proptest::prelude::*;
    use std::sync::Mutex;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("A Dog."), "dog");
        assert_eq!(normalize_answer("two"), "2");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer(" Yosemite.\n"), "yosemite");
        assert_eq!(normalize_answer("1,000 people"), "1000 people");
        assert_eq!(normalize_answer("red,  white and   blue"), "red, white and blue");
        assert_eq!(normalize_answer("The  Ten commandments"), "10 commandments");
        assert_eq!(normalize_answer("anthem"), "anthem");
        assert_eq!(normalize_answer("dog. the"), "dog");
    }

    proptest! {
        #[test]
        fn normalization_idempotent(s in "[ a-zA-Z0-9.,\\t\\n]{0,30}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }
    }

    fn instance() -> VqaInstance {
        VqaInstance {
            question_id: 9,
            image_id: 1,
            question: "Which park is famous for this animal?".into(),
            answers: vec![],
            captions: vec!["a black bear".into(), "grass and trees".into(), "a bear walking".into()],
        }
    }

    type Log = std::sync::Arc<Mutex<Vec<CompletionRequest>>>;

    fn recording(
        reply: &'static str,
    ) -> (FnBackend<impl Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync>, Log) {
        let log = Log::default();
        let sink = log.clone();
        let backend = FnBackend::new("t", move |r: &CompletionRequest| {
            sink.lock().unwrap().push(r.clone());
            Ok(reply.to_string())
        });
        (backend, log)
    }

    #[test]
    fn baseline_prompt_has_no_knowledge() {
        let (backend, log) = recording(" Yosemite.\nQuestion: more");
        let p = predict_answer(&instance(), &["k1".into()], 0, &backend, &QaConfig::default()).unwrap();
        assert_eq!(p.mode, PredictionMode::WithoutKnowledge);
        assert_eq!(p.raw_answer, "Yosemite.");
        assert_eq!(p.normalized_answer, "yosemite");
        assert_eq!(p.knowledge_used, 0);
        let req = &log.lock().unwrap()[0];
        assert!(!req.prompt.contains("Knowledge:"));
        assert_eq!(req.temperature, 0.0);
    }

    #[test]
    fn knowledge_prefix_is_used() {
        let (backend, log) = recording("yosemite");
        let knowledge: Vec<String> = (0..10).map(|i| format!("k{i}")).collect();
        let p = predict_answer(&instance(), &knowledge, 5, &backend, &QaConfig::default()).unwrap();
        assert_eq!(p.mode, PredictionMode::WithKnowledge);
        assert_eq!(p.knowledge_used, 5);
        assert!(log.lock().unwrap()[0].prompt.contains("\nKnowledge:k0 k1 k2 k3 k4\n"));
        assert!(matches!(
            predict_answer(&instance(), &knowledge, 11, &backend, &QaConfig::default()),
            Err(QaError::NotEnoughKnowledge { requested: 11, available: 10, .. })
        ));
    }

    #[test]
    fn failed_statements_are_skipped() {
        let (backend, log) = recording("x");
        let knowledge = vec!["k0".to_string(), String::new(), "k2".to_string()];
        let p = predict_answer(&instance(), &knowledge, 3, &backend, &QaConfig::default()).unwrap();
        assert_eq!(p.knowledge_used, 2);
        assert!(log.lock().unwrap()[0].prompt.contains("\nKnowledge:k0 k2\n"));
    }

    fn cot_demo() -> Demonstration {
        Demonstration {
            context: "c".into(),
            question: "q".into(),
            knowledge: "k".into(),
            answer: Some("a".into()),
        }
    }

    #[test]
    fn cot_parsing() {
        let (backend, _) = recording("Yosemite hosts black bears.\nAnswer: yosemite");
        let p = predict_cot(&instance(), &[cot_demo()], &backend, &QaConfig::default()).unwrap();
        assert_eq!(p.raw_answer, "yosemite");
        assert_eq!(p.mode, PredictionMode::Cot);

        let (backend, _) = recording("Yosemite hosts black bears.");
        assert!(matches!(
            predict_cot(&instance(), &[cot_demo()], &backend, &QaConfig::default()),
            Err(QaError::ParseFailure { question_id: 9 })
        ));
    }

    #[test]
    fn fid_contexts() {
        let knowledge = vec!["k1".to_string(), "k2".to_string(), "k3".to_string()];
        let r = fid_record(&instance(), &knowledge, 2).unwrap();
        assert_eq!(r.contexts.len(), 5);
        assert_eq!(&r.contexts[3..], ["k1", "k2"]);
        let r0 = fid_record(&instance(), &knowledge, 0).unwrap();
        assert_eq!(r0.contexts, instance().captions);
    }

    #[test]
    fn fid_writer_lines_roundtrip() {
        let mut w = FidWriter::new(Vec::new(), &FidHeader::default()).unwrap();
        let rec = w.export(&instance(), &["k".into()], 1).unwrap();
        let bytes = w.finish().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["length_penalty"], -1.0);
        let back: FidContextRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, rec);
    }
}
