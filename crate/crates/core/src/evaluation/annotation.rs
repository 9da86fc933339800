//! Blinded annotation tasks: only the question, an image reference and the
//! sampled statements leave the pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dataset::Dataset;
use crate::knowledge_gen::KnowledgeSet;
use crate::seeding::derive_rng;

/// Keys that would unblind an annotator. None may appear in a task file.
pub const FORBIDDEN_TASK_KEYS: [&str; 4] = ["prediction", "answer", "correct", "flip"];

/// `{image_id}` is replaced by the zero-padded 12-digit COCO image id.
pub const DEFAULT_IMAGE_REF_TEMPLATE: &str = "COCO_val2014_{image_id}.jpg";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationTask {
    pub question_id: u64,
    pub question: String,
    pub image_ref: String,
    pub statements: Vec<String>,
}

pub fn image_ref(template: &str, image_id: u64) -> String {
    template.replace("{image_id}", &format!("{image_id:012}"))
}

/// Writes one task per flip question with up to `sample_per_question`
/// statements drawn without replacement (kept in draw order).
pub fn export_annotation_tasks(
    flips: &[u64],
    dataset: &Dataset,
    knowledge: &[KnowledgeSet],
    sample_per_question: usize,
    seed: u64,
    image_ref_template: &str,
    path: &Path,
) -> Result<Vec<AnnotationTask>, EvalError> {
    if sample_per_question == 0 {
        return Err(EvalError::PreconditionViolation("sample_per_question must be positive".into()));
    }
    let by_id: BTreeMap<u64, &KnowledgeSet> = knowledge.iter().map(|k| (k.question_id, k)).collect();
    let mut tasks = Vec::with_capacity(flips.len());
    for &question_id in flips {
        let instance = dataset.get(question_id).ok_or(EvalError::UnknownQuestionId(question_id))?;
        let usable = by_id
            .get(&question_id)
            .map(|k| k.usable())
            .filter(|u| !u.is_empty())
            .ok_or(EvalError::MissingKnowledge(question_id))?;
        let mut picked: Vec<usize> = if usable.len() <= sample_per_question {
            (0..usable.len()).collect()
        } else {
            let mut rng = derive_rng("annotation", &[seed, question_id]);
            rand::seq::index::sample(&mut rng, usable.len(), sample_per_question).into_vec()
        };
        picked.sort_unstable();
        tasks.push(AnnotationTask {
            question_id,
            question: instance.question.clone(),
            image_ref: image_ref(image_ref_template, instance.image_id),
            statements: picked.into_iter().map(|i| usable[i].to_string()).collect(),
        });
    }
    let mut text = serde_json::to_string_pretty(&tasks).expect("tasks serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(tasks)
}
