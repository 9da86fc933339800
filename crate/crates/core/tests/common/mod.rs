//! Synthetic desk-scale workspace: questions, answers, captions, and a
//! transcript covering every completion the CLI pipeline will request.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use kvqa_core::clustering::kmeans_fit;
use kvqa_core::config::QaConfig;
use kvqa_core::dataset::Dataset;
use kvqa_core::knowledge_gen::{diversify, generate_initial};
use kvqa_core::llm::{BackendError, CachedBackend, CompletionRequest, FnBackend, HashingEmbedder};
use kvqa_core::prompting::QA_INSTRUCTION;
use kvqa_core::GenerationConfig;

const TOPICS: [[&str; 4]; 8] = [
    ["bear", "forest", "grass", "trees"],
    ["bus", "street", "traffic", "city"],
    ["pizza", "table", "cheese", "plate"],
    ["surfer", "wave", "ocean", "board"],
    ["skier", "snow", "mountain", "slope"],
    ["train", "station", "tracks", "platform"],
    ["cat", "sofa", "pillow", "living room"],
    ["kite", "beach", "sky", "wind"],
];

pub struct Workspace {
    pub root: PathBuf,
    pub config: PathBuf,
    pub transcript: PathBuf,
    pub work_dir: PathBuf,
}

pub struct Fixture {
    pub instances: u64,
    pub t_statements: usize,
    /// Questions answered correctly only when knowledge is present.
    pub flips: Vec<u64>,
    /// Knowledge counts the transcript must cover.
    pub grid: Vec<usize>,
}

/// Fowler-Noll-Vo hash, so fixture text varies with the prompt.
fn fnv(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn target_question_id(prompt: &str) -> u64 {
    let last = prompt.rsplit("\nQuestion:").next().unwrap();
    let digits: String = last
        .trim_start_matches("Question ")
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().expect("fixture question carries its id")
}

pub fn correct_with(question_id: u64, has_knowledge: bool, flips: &BTreeSet<u64>) -> bool {
    if flips.contains(&question_id) {
        has_knowledge
    } else {
        !question_id.is_multiple_of(3)
    }
}

fn respond(request: &CompletionRequest, flips: &BTreeSet<u64>) -> Result<String, BackendError> {
    let prompt = &request.prompt;
    let qid = target_question_id(prompt);
    if prompt.starts_with(QA_INSTRUCTION) {
        let has_knowledge = prompt.contains("\nKnowledge:");
        return Ok(if correct_with(qid, has_knowledge, flips) {
            format!(" Answer{qid}.\nextra line")
        } else {
            " nothing".to_string()
        });
    }
    let topic = TOPICS[(qid % 8) as usize];
    let variant = fnv(prompt) % 4;
    Ok(format!(
        " The {} is often seen near the {} (note {variant}).\n\nContext: echoed",
        topic[0], topic[1 + (variant as usize % 3)]
    ))
}

pub fn generation(fixture: &Fixture) -> GenerationConfig {
    let mut g = GenerationConfig::new(2);
    g.t_statements = fixture.t_statements;
    g.seed = 7;
    g.kmeans_restarts = 4;
    g
}

pub fn build(root: &Path, fixture: &Fixture) -> Workspace {
    let mut questions = Vec::new();
    let mut annotations = Vec::new();
    let mut captions = String::new();
    for i in 1..=fixture.instances {
        let topic = TOPICS[(i % 8) as usize];
        questions.push(serde_json::json!({
            "image_id": 1000 + i,
            "question": format!("Question {i}: what is special about the {}?", topic[0]),
            "question_id": i,
        }));
        let answers: Vec<serde_json::Value> = (0..10)
            .map(|a| {
                let text = if i % 5 == 0 && a >= 3 { "something else".to_string() } else { format!("answer{i}") };
                serde_json::json!({"answer": text, "answer_id": a + 1})
            })
            .collect();
        annotations.push(serde_json::json!({"question_id": i, "answers": answers}));
        let line = serde_json::json!({
            "question_id": i,
            "captions": [
                format!("a {} near the {} number {i}", topic[0], topic[1]),
                format!("the {} and {} in view", topic[2], topic[3]),
                "an ignored third caption",
            ],
        });
        captions.push_str(&line.to_string());
        captions.push('\n');
    }
    let data = root.join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(
        data.join("synthetic_val.json"),
        serde_json::json!({"questions": questions}).to_string(),
    )
    .unwrap();
    fs::write(
        data.join("synthetic_annotations.json"),
        serde_json::json!({"annotations": annotations}).to_string(),
    )
    .unwrap();
    fs::write(data.join("captions.jsonl"), captions).unwrap();

    let g = generation(fixture);
    let config = serde_json::json!({
        "paths": {
            "questions": "data/synthetic_val.json",
            "annotations": "data/synthetic_annotations.json",
            "captions": "data/captions.jsonl",
            "work_dir": "work",
            "cache": "work/cache.jsonl",
            "embedding_cache": "work/embeddings.jsonl",
            "transcript": "data/transcript.jsonl",
        },
        "generation": g,
        "backend": "scripted",
        "num_knowledge": 5,
    });
    let config_path = root.join("run.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let transcript = data.join("transcript.jsonl");
    record_transcript(&data, &transcript, fixture);
    Workspace {
        root: root.to_path_buf(),
        config: config_path,
        transcript,
        work_dir: root.join("work"),
    }
}

/// Replays the pipeline against a closure backend whose id matches the
/// scripted backend, so its cache file doubles as the transcript.
fn record_transcript(data: &Path, transcript: &Path, fixture: &Fixture) {
    let mut dataset = Dataset::load_questions(&data.join("synthetic_val.json")).unwrap();
    dataset.load_annotations(&data.join("synthetic_annotations.json")).unwrap();
    dataset.attach_captions(&data.join("captions.jsonl"), 2).unwrap();

    let flips: BTreeSet<u64> = fixture.flips.iter().copied().collect();
    let backend = CachedBackend::open(
        FnBackend::new("scripted", move |r: &CompletionRequest| respond(r, &flips)),
        transcript,
    )
    .unwrap();
    let g = generation(fixture);
    let initial = generate_initial(&dataset, &g, &backend).unwrap();
    let embedded = initial.pool.clone().embed(&HashingEmbedder).unwrap();
    let model = kmeans_fit(&embedded, &g.kmeans_params()).unwrap();
    let sets = diversify(&dataset, &initial.pool, &model, &g, &backend).unwrap().sets;
    let qa: QaConfig = serde_json::from_str("{}").unwrap();
    for &n in &fixture.grid {
        for (inst, set) in dataset.instances.iter().zip(&sets) {
            kvqa_core::qa::predict_answer(inst, &set.statements, n, &backend, &qa).unwrap();
        }
    }
}

pub fn kvqa(ws: &Workspace, args: &[&str]) -> Result<kvqa_core::cli::Outcome, kvqa_core::cli::CliError> {
    let config = ws.config.to_str().unwrap();
    let mut full = vec!["kvqa", "--config", config];
    full.extend_from_slice(args);
    kvqa_core::cli::run(full)
}
