//! Prompt rendering for knowledge generation, QA, and chain-of-thought.
//!
//! Blocks use `Context:`/`Question:`/`Knowledge:` labels with no space after
//! the colon, `\n` between fields of a block and `\n\n` between blocks. The
//! layout is frozen by the golden file under `tests/golden/`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub const KGEN_INSTRUCTION: &str = "Please generate related background knowledge to the question:";
pub const QA_INSTRUCTION: &str = "Generate answers with as fewer words as possible.";

const MANUAL_DEMOS_JSON: &str = include_str!("../data/manual_demos.json");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("caption list is empty")]
    EmptyCaptionList,
    #[error("no demonstrations supplied")]
    EmptyDemonstrations,
    #[error("chain-of-thought demonstration {0} has no answer")]
    MissingAnswerInDemo(usize),
    #[error("precondition violated: {0}")]
    PreconditionViolation(&'static str),
}

/// One in-context example. `answer` is only set for chain-of-thought demos.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub context: String,
    pub question: String,
    pub knowledge: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    KnowledgeGen,
    Qa,
    Cot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub kind: PromptKind,
}

/// The six hand-written demonstrations used for the initial generation pass.
pub fn manual_demonstrations() -> &'static [Demonstration] {
    static DEMOS: OnceLock<Vec<Demonstration>> = OnceLock::new();
    DEMOS.get_or_init(|| serde_json::from_str(MANUAL_DEMOS_JSON).expect("bundled demonstrations parse"))
}

/// Joins captions into one context string: each caption trimmed, ending in
/// a period, separated by a single space. Blank captions are skipped.
pub fn concat_captions<S: AsRef<str>>(captions: &[S]) -> Result<String, PromptError> {
    let parts: Vec<String> = captions
        .iter()
        .map(|c| c.as_ref().trim())
        .filter(|c| !c.is_empty())
        .map(|c| {
            if c.ends_with('.') {
                c.to_string()
            } else {
                format!("{c}.")
            }
        })
        .collect();
    if parts.is_empty() {
        return Err(PromptError::EmptyCaptionList);
    }
    Ok(parts.join(" "))
}

fn push_block(out: &mut String, context: &str, question: &str) {
    out.push_str("Context:");
    out.push_str(context);
    out.push_str("\nQuestion:");
    out.push_str(question);
    out.push_str("\nKnowledge:");
}

fn render_blocks(
    demos: &[Demonstration],
    context: &str,
    question: &str,
    with_answers: bool,
) -> String {
    let mut out = String::from(KGEN_INSTRUCTION);
    out.push_str("\n\n");
    for demo in demos {
        push_block(&mut out, &demo.context, &demo.question);
        out.push_str(&demo.knowledge);
        if with_answers {
            out.push_str("\nAnswer:");
            out.push_str(demo.answer.as_deref().unwrap_or_default());
        }
        out.push_str("\n\n");
    }
    push_block(&mut out, context, question);
    out
}

fn check_target(context: &str, question: &str) -> Result<(), PromptError> {
    if context.is_empty() {
        return Err(PromptError::PreconditionViolation("context is empty"));
    }
    if question.is_empty() {
        return Err(PromptError::PreconditionViolation("question is empty"));
    }
    Ok(())
}

pub fn render_kgen_prompt(
    demos: &[Demonstration],
    context: &str,
    question: &str,
) -> Result<PromptText, PromptError> {
    if demos.is_empty() {
        return Err(PromptError::EmptyDemonstrations);
    }
    check_target(context, question)?;
    Ok(PromptText {
        text: render_blocks(demos, context, question, false),
        kind: PromptKind::KnowledgeGen,
    })
}

/// QA prompt. An empty `knowledge` slice gives the no-knowledge baseline,
/// which has no `Knowledge:` line at all.
pub fn render_qa_prompt<S: AsRef<str>>(
    knowledge: &[S],
    context: &str,
    question: &str,
    instruction: &str,
) -> Result<PromptText, PromptError> {
    check_target(context, question)?;
    let mut text = format!("{instruction}\n\nContext:{context}");
    if !knowledge.is_empty() {
        let joined: Vec<&str> = knowledge.iter().map(AsRef::as_ref).collect();
        text.push_str("\nKnowledge:");
        text.push_str(&joined.join(" "));
    }
    text.push_str("\nQuestion:");
    text.push_str(question);
    text.push_str("\nAnswer:");
    Ok(PromptText {
        text,
        kind: PromptKind::Qa,
    })
}

/// Like [`render_kgen_prompt`], with each demo followed by `Answer:`. The
/// model is expected to continue with knowledge and then an answer.
pub fn render_cot_prompt(
    demos: &[Demonstration],
    context: &str,
    question: &str,
) -> Result<PromptText, PromptError> {
    if demos.is_empty() {
        return Err(PromptError::EmptyDemonstrations);
    }
    if let Some(i) = demos.iter().position(|d| d.answer.is_none()) {
        return Err(PromptError::MissingAnswerInDemo(i));
    }
    check_target(context, question)?;
    Ok(PromptText {
        text: render_blocks(demos, context, question, true),
        kind: PromptKind::Cot,
    })
}
