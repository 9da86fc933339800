//! Browser bindings for three pipeline pieces that need no model: answer
//! scoring, k-means with cross-cluster demonstration draws, and the manual
//! knowledge-generation prompt.

use kvqa_core::clustering::{kmeans_points, DemoSampler};
use kvqa_core::evaluation::vqa_soft_accuracy;
use kvqa_core::prompting::{manual_demonstrations, render_kgen_prompt};
use kvqa_core::qa::normalize_answer;
use kvqa_core::KMeansParams;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Scored {
    prediction: String,
    answers: Vec<String>,
    accuracy: f64,
}

/// `answers` holds one ground-truth answer per line.
pub fn score(prediction: &str, answers: &str) -> Result<String, String> {
    let answers: Vec<String> = answers
        .lines()
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(normalize_answer)
        .collect();
    let prediction = normalize_answer(prediction);
    let accuracy = vqa_soft_accuracy(&prediction, &answers).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&Scored {
        prediction,
        answers,
        accuracy,
    })
    .expect("result serializes"))
}

#[derive(Serialize)]
struct Clustered {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    /// One point per non-empty cluster other than the target's.
    demos: Vec<usize>,
}

/// `points` is a JSON array of `[x, y]` pairs.
pub fn cluster(points: &str, k: usize, seed: u64, target: usize, draw: u64) -> Result<String, String> {
    let points: Vec<Vec<f64>> = serde_json::from_str(points).map_err(|e| e.to_string())?;
    let params = KMeansParams {
        k,
        seed,
        restarts: 10,
        max_iters: 300,
    };
    let model = kmeans_points(&points, &params).map_err(|e| e.to_string())?;
    let sampler = DemoSampler::new(&model, &vec![true; points.len()]).map_err(|e| e.to_string())?;
    let demos = sampler.draw(target, 0, seed, draw).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&Clustered {
        assignments: model.assignments,
        centroids: model.centroids,
        inertia: model.inertia,
        demos,
    })
    .expect("result serializes"))
}

pub fn prompt(context: &str, question: &str) -> Result<String, String> {
    render_kgen_prompt(manual_demonstrations(), context.trim(), question.trim())
        .map(|p| p.text)
        .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn soft_accuracy(prediction: &str, answers: &str) -> Result<String, JsError> {
    score(prediction, answers).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cluster_points(points: &str, k: usize, seed: u64, target: usize, draw: u64) -> Result<String, JsError> {
    cluster(points, k, seed, target, draw).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn render_prompt(context: &str, question: &str) -> Result<String, JsError> {
    prompt(context, question).map_err(|e| JsError::new(&e))
}
