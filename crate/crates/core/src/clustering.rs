//! Clustering of first-stage (context, question, knowledge) triplets and
//! cross-cluster demonstration sampling.
//!
//! Each triplet is embedded from `context + " " + question + " " + knowledge`.
//! K-means uses k-means++ seeding and Lloyd iterations; the best of several
//! seeded restarts is kept. To diversify the demonstrations for one target,
//! one triplet is drawn from every cluster except the target's own.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::llm::{BackendError, EmbeddingBackend, EmbeddingVector};
use crate::prompting::Demonstration;
use crate::seeding::derive_rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("k = {k} exceeds the number of points ({points})")]
    KTooLarge { k: usize, points: usize },
    #[error("pool has no embeddings")]
    PoolNotEmbedded,
    #[error("point {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("cluster model covers {model} points but the pool has {pool}")]
    ModelPoolMismatch { model: usize, pool: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriplet {
    pub question_id: u64,
    pub context: String,
    pub question: String,
    pub knowledge: String,
}

impl KnowledgeTriplet {
    pub fn embedding_text(&self) -> String {
        format!("{} {} {}", self.context, self.question, self.knowledge)
    }

    /// Triplets whose generation failed carry an empty statement and are
    /// never offered as demonstrations.
    pub fn is_usable(&self) -> bool {
        !self.knowledge.is_empty()
    }

    pub fn to_demonstration(&self) -> Demonstration {
        Demonstration {
            context: self.context.clone(),
            question: self.question.clone(),
            knowledge: self.knowledge.clone(),
            answer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletPool {
    pub triplets: Vec<KnowledgeTriplet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<EmbeddingVector>>,
}

impl TripletPool {
    pub fn new(triplets: Vec<KnowledgeTriplet>) -> Self {
        TripletPool {
            triplets,
            embeddings: None,
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Embeds every triplet and checks that all vectors share one dimension.
    pub fn embed(mut self, backend: &dyn EmbeddingBackend) -> Result<TripletPool, ClusterError> {
        if self.triplets.is_empty() {
            return Err(ClusterError::PreconditionViolation("pool is empty".into()));
        }
        let texts: Vec<String> = self.triplets.iter().map(KnowledgeTriplet::embedding_text).collect();
        let vectors = backend.embed(&texts)?;
        if vectors.len() != texts.len() {
            return Err(ClusterError::PreconditionViolation(format!(
                "backend returned {} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        check_dimensions(vectors.iter().map(|v| v.values.as_slice()))?;
        self.embeddings = Some(vectors);
        Ok(self)
    }
}

fn check_dimensions<'a>(points: impl Iterator<Item = &'a [f64]>) -> Result<usize, ClusterError> {
    let mut dim = None;
    for (index, p) in points.enumerate() {
        let expected = *dim.get_or_insert(p.len());
        if p.len() != expected {
            return Err(ClusterError::DimensionMismatch {
                index,
                expected,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::PreconditionViolation(format!(
                "point {index} has a non-finite coordinate"
            )));
        }
    }
    Ok(dim.unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 8,
            seed: 0,
            restarts: 10,
            max_iters: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl ClusterModel {
    /// Pool indices grouped by cluster, ascending within each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, &c) in self.assignments.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut closest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let center = points[pick].clone();
        for (d, p) in closest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &center));
        }
        centroids.push(center);
    }
    centroids
}

fn recompute_means(points: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (j, (sum, &count)) in sums.into_iter().zip(&counts).enumerate() {
        if count > 0 {
            centroids[j] = sum.into_iter().map(|s| s / count as f64).collect();
        }
    }
    counts
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from a cluster that keeps at least one member.
fn reseed_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>], counts: &mut [usize]) {
    let mut dist: Vec<f64> = points
        .iter()
        .zip(assignments.iter())
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .collect();
    for j in 0..centroids.len() {
        if counts[j] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = donor else { break };
        counts[assignments[i]] -= 1;
        assignments[i] = j;
        counts[j] = 1;
        centroids[j] = points[i].clone();
        dist[i] = 0.0;
    }
}

struct RunResult {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
}

fn lloyd_run(
    points: &[Vec<f64>],
    params: &KMeansParams,
    restart: usize,
    trace: &mut dyn FnMut(usize, usize, f64),
) -> RunResult {
    let mut rng = derive_rng("kmeans", &[params.seed, restart as u64]);
    let mut centroids = plus_plus_init(points, params.k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    for iter in 0..params.max_iters {
        let mut changed = false;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (j, _) = nearest(p, &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = recompute_means(points, &assignments, &mut centroids);
        if counts.contains(&0) {
            reseed_empty(points, &mut assignments, &mut centroids, &mut counts);
            recompute_means(points, &assignments, &mut centroids);
        }
        trace(restart, iter, inertia(points, &centroids, &assignments));
    }
    let inertia = inertia(points, &centroids, &assignments);
    RunResult {
        centroids,
        assignments,
        inertia,
    }
}

/// K-means over raw points. `trace` receives `(restart, iteration, inertia)`
/// after every Lloyd update.
pub fn kmeans_points_traced(
    points: &[Vec<f64>],
    params: &KMeansParams,
    trace: &mut dyn FnMut(usize, usize, f64),
) -> Result<ClusterModel, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::PreconditionViolation("no points to cluster".into()));
    }
    if params.k == 0 || params.restarts == 0 || params.max_iters == 0 {
        return Err(ClusterError::PreconditionViolation(
            "k, restarts, and max_iters must be positive".into(),
        ));
    }
    if params.k > points.len() {
        return Err(ClusterError::KTooLarge {
            k: params.k,
            points: points.len(),
        });
    }
    check_dimensions(points.iter().map(Vec::as_slice))?;
    let mut best: Option<RunResult> = None;
    for restart in 0..params.restarts {
        let run = lloyd_run(points, params, restart, trace);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(ClusterModel {
        k: params.k,
        seed: params.seed,
        centroids: best.centroids,
        assignments: best.assignments,
        inertia: best.inertia,
    })
}

pub fn kmeans_points(points: &[Vec<f64>], params: &KMeansParams) -> Result<ClusterModel, ClusterError> {
    kmeans_points_traced(points, params, &mut |_, _, _| {})
}

pub fn kmeans_fit(pool: &TripletPool, params: &KMeansParams) -> Result<ClusterModel, ClusterError> {
    let embeddings = pool.embeddings.as_ref().ok_or(ClusterError::PoolNotEmbedded)?;
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
    kmeans_points(&points, params)
}

/// Per-cluster member lists for repeated draws against one model.
#[derive(Debug, Clone)]
pub struct DemoSampler<'a> {
    model: &'a ClusterModel,
    eligible: Vec<Vec<usize>>,
}

impl<'a> DemoSampler<'a> {
    /// `usable[i]` says whether pool entry `i` may serve as a demonstration.
    pub fn new(model: &'a ClusterModel, usable: &[bool]) -> Result<Self, ClusterError> {
        if model.assignments.len() != usable.len() {
            return Err(ClusterError::ModelPoolMismatch {
                model: model.assignments.len(),
                pool: usable.len(),
            });
        }
        if model.assignments.iter().any(|&a| a >= model.k) {
            return Err(ClusterError::PreconditionViolation(
                "cluster assignment out of range".into(),
            ));
        }
        let eligible = model
            .members()
            .into_iter()
            .map(|m| m.into_iter().filter(|&i| usable[i]).collect())
            .collect();
        Ok(DemoSampler { model, eligible })
    }

    pub fn for_pool(model: &'a ClusterModel, pool: &TripletPool) -> Result<Self, ClusterError> {
        let usable: Vec<bool> = pool.triplets.iter().map(KnowledgeTriplet::is_usable).collect();
        Self::new(model, &usable)
    }

    /// One pool index per non-empty cluster other than the target's, in
    /// ascending cluster order. The generator is keyed by
    /// `(seed, question_id, draw_index)`.
    pub fn draw(
        &self,
        target_index: usize,
        question_id: u64,
        seed: u64,
        draw_index: u64,
    ) -> Result<Vec<usize>, ClusterError> {
        let &own = self.model.assignments.get(target_index).ok_or_else(|| {
            ClusterError::PreconditionViolation(format!("target index {target_index} out of range"))
        })?;
        let mut rng = derive_rng("demo-draw", &[seed, question_id, draw_index]);
        Ok(self
            .eligible
            .iter()
            .enumerate()
            .filter(|&(c, members)| c != own && !members.is_empty())
            .map(|(_, members)| members[rng.gen_range(0..members.len())])
            .collect())
    }
}

pub fn sample_demonstrations(
    model: &ClusterModel,
    pool: &TripletPool,
    target_index: usize,
    seed: u64,
    draw_index: u64,
) -> Result<Vec<KnowledgeTriplet>, ClusterError> {
    let sampler = DemoSampler::for_pool(model, pool)?;
    let question_id = pool
        .triplets
        .get(target_index)
        .map(|t| t.question_id)
        .ok_or_else(|| ClusterError::PreconditionViolation(format!("target index {target_index} out of range")))?;
    Ok(sampler
        .draw(target_index, question_id, seed, draw_index)?
        .into_iter()
        .map(|i| pool.triplets[i].clone())
        .collect())
}
