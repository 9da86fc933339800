//! `kvqa` command line: one subcommand per pipeline stage.
//!
//! Every subcommand reads a JSON run configuration, writes its output under
//! the configured work directory (or `--out`), and writes a manifest beside
//! it. All completions go through the persistent cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, ClusterModel, TripletPool};
use crate::config::{GenerationConfig, QaConfig};
use crate::dataset::Dataset;
use crate::evaluation::{
    aggregate_ratings, evaluate_run, export_annotation_tasks, import_ratings, kappa_tables, select_flip_cases,
    AggregateMode, EvalReport, MetricKappa, RatingScores, DEFAULT_IMAGE_REF_TEMPLATE,
};
use crate::jsonl;
use crate::knowledge_gen::{diversify, generate_initial, load_knowledge, save_knowledge, KnowledgeSet};
use crate::llm::{
    BackendError, CachedBackend, CachedEmbedder, CompletionBackend, CompletionRequest, CompletionResult,
    EmbeddingBackend, HashingEmbedder, ScriptedBackend,
};
#[cfg(feature = "http")]
use crate::llm::{HttpBackend, HttpConfig, RetryPolicy, Retrying};
use crate::manifest::{digest_bytes, Manifest};
use crate::pool::map_bounded;
use crate::prompting::Demonstration;
use crate::qa::{predict_answer, predict_cot, AnswerPrediction, FidHeader, FidWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Completions and embeddings from an OpenAI-compatible server.
    Http,
    /// Completions replayed from a transcript, hashing embeddings.
    Scripted,
    /// Hashing embeddings only; completion requests fail unless cached.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub questions: PathBuf,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    pub captions: PathBuf,
    pub work_dir: PathBuf,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub embedding_cache: Option<PathBuf>,
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    /// JSON array of demonstrations with answers, for `answer-cot`.
    #[serde(default)]
    pub cot_demos: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationExportConfig {
    #[serde(default = "default_sample_per_question")]
    pub sample_per_question: usize,
    #[serde(default = "default_image_ref_template")]
    pub image_ref_template: String,
}

fn default_sample_per_question() -> usize {
    5
}
fn default_image_ref_template() -> String {
    DEFAULT_IMAGE_REF_TEMPLATE.into()
}

impl Default for AnnotationExportConfig {
    fn default() -> Self {
        AnnotationExportConfig {
            sample_per_question: default_sample_per_question(),
            image_ref_template: default_image_ref_template(),
        }
    }
}

/// Everything a run needs, in its on-disk form. Relative paths are
/// resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub generation: GenerationConfig,
    #[serde(default = "default_qa")]
    pub qa: QaConfig,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    #[cfg(feature = "http")]
    #[serde(default)]
    pub http: Option<HttpConfig>,
    #[serde(default = "default_num_knowledge")]
    pub num_knowledge: usize,
    #[serde(default = "default_sweep_grid")]
    pub sweep_grid: Vec<usize>,
    #[serde(default = "default_flip_count")]
    pub flip_count: usize,
    #[serde(default)]
    pub annotation: AnnotationExportConfig,
}

fn default_qa() -> QaConfig {
    serde_json::from_str("{}").expect("qa defaults")
}
fn default_backend() -> BackendKind {
    BackendKind::Scripted
}
fn default_num_knowledge() -> usize {
    5
}
fn default_sweep_grid() -> Vec<usize> {
    vec![0, 5, 10, 20]
}
fn default_flip_count() -> usize {
    40
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::new("invalid_config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve(base);
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.questions);
        fix(&mut paths.captions);
        fix(&mut paths.work_dir);
        for p in [
            &mut paths.annotations,
            &mut paths.cache,
            &mut paths.embedding_cache,
            &mut paths.transcript,
            &mut paths.cot_demos,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        digest_bytes(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn work(&self, name: &str) -> PathBuf {
        self.paths.work_dir.join(name)
    }
}

/// Error reported by the binary as one JSON line on stderr.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new("io", format!("{}: {e}", path.display()))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

macro_rules! cli_error_from {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($kind, e.to_string())
            }
        })*
    };
}

cli_error_from! {
    crate::dataset::DatasetError => "dataset",
    crate::clustering::ClusterError => "clustering",
    crate::knowledge_gen::KgenError => "knowledge_generation",
    crate::qa::QaError => "answering",
    crate::evaluation::EvalError => "evaluation",
    crate::evaluation::KappaError => "kappa",
    crate::jsonl::JsonlError => "jsonl",
    BackendError => "backend",
}

#[derive(Debug, Parser)]
#[command(name = "kvqa", about = "Zero-shot knowledge-based VQA: generate knowledge, then answer")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the generation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Knowledge statements per question for `answer` and `export-fid`.
    #[arg(long, global = true)]
    pub num_knowledge: Option<usize>,
    /// Output file (default: a fixed name in the work directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load questions, answers and captions; report coverage.
    Ingest,
    /// One knowledge statement per question from the manual demonstrations.
    GenInitial,
    /// Embed the initial triplets and cluster them.
    Cluster,
    /// T statements per question from cluster-sampled demonstrations.
    Diversify,
    /// Answer with the first N statements of each knowledge set.
    Answer,
    /// Chain-of-thought answering.
    AnswerCot,
    /// Export fusion-in-decoder contexts.
    ExportFid,
    /// Score a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Questions whose correctness differs between two reports.
    Flips {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Blinded annotation tasks for the flip questions.
    ExportAnnotation {
        #[arg(long)]
        flips: PathBuf,
    },
    /// Fleiss' kappa per metric from a ratings file.
    Kappa {
        #[arg(long)]
        ratings: PathBuf,
    },
    /// Percent scores per metric from a ratings file.
    AggregateRatings {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, default_value = "avg")]
        mode: CliAggregateMode,
    },
    /// Answer and evaluate for each N in the grid.
    SweepKnowledge {
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliAggregateMode {
    Avg,
    Max,
}

impl From<CliAggregateMode> for AggregateMode {
    fn from(m: CliAggregateMode) -> Self {
        match m {
            CliAggregateMode::Avg => AggregateMode::Avg,
            CliAggregateMode::Max => AggregateMode::Max,
        }
    }
}

/// What a subcommand produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub command: String,
    pub outputs: Vec<PathBuf>,
    /// Completion requests that reached the underlying backend.
    pub backend_calls: usize,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dataset_name: String,
    pub num_instances: usize,
    pub missing_annotations: Vec<u64>,
    pub missing_captions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipList {
    pub question_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub per_metric: Vec<MetricKappa>,
    pub mean_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsReport {
    pub scores: RatingScores,
    pub mean_distinct_statements: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub num_knowledge: usize,
    pub mean_soft_accuracy: f64,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

/// Refuses every completion. Cached prompts still resolve.
struct NoCompletions;

impl CompletionBackend for NoCompletions {
    fn backend_id(&self) -> &str {
        "fallback"
    }
    fn complete(&self, _: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        Err(BackendError::Refusal("the fallback backend only provides embeddings".into()))
    }
}

struct Context {
    config: RunConfig,
    config_path: Option<PathBuf>,
    out: Option<PathBuf>,
    command: String,
}

impl Context {
    fn config(&self) -> Result<&RunConfig, CliError> {
        if self.config_path.is_none() {
            return Err(CliError::new("missing_config", format!("{} needs --config", self.command)));
        }
        Ok(&self.config)
    }

    fn output(&self, default_name: &str) -> Result<PathBuf, CliError> {
        let path = match &self.out {
            Some(p) => p.clone(),
            None => self.config()?.work(default_name),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(path)
    }

    fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(self.command.clone(), self.config.hash());
        m.seeds.insert("generation".into(), self.config.generation.seed);
        m
    }

    fn load_dataset(&self, manifest: &mut Manifest) -> Result<Dataset, CliError> {
        let config = self.config()?;
        let paths = &config.paths;
        require(&paths.questions)?;
        require(&paths.captions)?;
        let mut dataset = Dataset::load_questions(&paths.questions)?;
        manifest.add_input(&paths.questions).map_err(|e| CliError::io(&paths.questions, e))?;
        if let Some(annotations) = &paths.annotations {
            require(annotations)?;
            dataset.load_annotations(annotations)?;
            manifest.add_input(annotations).map_err(|e| CliError::io(annotations, e))?;
        }
        dataset.attach_captions(&paths.captions, config.generation.max_captions)?;
        manifest.add_input(&paths.captions).map_err(|e| CliError::io(&paths.captions, e))?;
        Ok(dataset)
    }

    fn completion_backend(&self) -> Result<CachedBackend<Box<dyn CompletionBackend>>, CliError> {
        let config = self.config()?;
        let inner: Box<dyn CompletionBackend> = match config.backend {
            BackendKind::Scripted => {
                let path = config
                    .paths
                    .transcript
                    .as_ref()
                    .ok_or_else(|| CliError::new("invalid_config", "scripted backend needs paths.transcript"))?;
                require(path)?;
                Box::new(ScriptedBackend::load(path)?)
            }
            BackendKind::Fallback => Box::new(NoCompletions),
            BackendKind::Http => self.http_completions()?,
        };
        Ok(match &config.paths.cache {
            Some(path) => CachedBackend::open(inner, path)?,
            None => CachedBackend::in_memory(inner),
        })
    }

    #[cfg(feature = "http")]
    fn http_config(&self) -> Result<HttpConfig, CliError> {
        self.config
            .http
            .clone()
            .ok_or_else(|| CliError::new("invalid_config", "http backend needs an \"http\" section"))
    }

    #[cfg(feature = "http")]
    fn http_completions(&self) -> Result<Box<dyn CompletionBackend>, CliError> {
        let backend = HttpBackend::from_env(self.http_config()?);
        Ok(Box::new(Retrying::new(backend, RetryPolicy::default())))
    }

    #[cfg(not(feature = "http"))]
    fn http_completions(&self) -> Result<Box<dyn CompletionBackend>, CliError> {
        Err(CliError::new("invalid_config", "built without the http feature"))
    }

    fn embedding_backend(&self) -> Result<CachedEmbedder<Box<dyn EmbeddingBackend>>, CliError> {
        let config = self.config()?;
        let inner: Box<dyn EmbeddingBackend> = match config.backend {
            BackendKind::Http => self.http_embeddings()?,
            BackendKind::Scripted | BackendKind::Fallback => Box::new(HashingEmbedder),
        };
        Ok(match &config.paths.embedding_cache {
            Some(path) => CachedEmbedder::open(inner, path)?,
            None => CachedEmbedder::in_memory(inner),
        })
    }

    #[cfg(feature = "http")]
    fn http_embeddings(&self) -> Result<Box<dyn EmbeddingBackend>, CliError> {
        let backend = HttpBackend::from_env(self.http_config()?);
        Ok(Box::new(Retrying::new(backend, RetryPolicy::default())))
    }

    #[cfg(not(feature = "http"))]
    fn http_embeddings(&self) -> Result<Box<dyn EmbeddingBackend>, CliError> {
        Err(CliError::new("invalid_config", "built without the http feature"))
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new("missing_file", path.display().to_string()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("malformed_json", format!("{}: {e}", path.display())))
}

fn finish(mut manifest: Manifest, outputs: &[&Path]) -> Result<Vec<PathBuf>, CliError> {
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    manifest
        .write()
        .map_err(|e| CliError::new("io", format!("writing manifest: {e}")))?;
    Ok(outputs.iter().map(|p| p.to_path_buf()).collect())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, S>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return Err(CliError::new("usage", e.to_string().trim_end())),
    };
    execute(cli)
}

fn placeholder_config() -> RunConfig {
    RunConfig {
        paths: PathsConfig {
            questions: PathBuf::new(),
            annotations: None,
            captions: PathBuf::new(),
            work_dir: PathBuf::new(),
            cache: None,
            embedding_cache: None,
            transcript: None,
            cot_demos: None,
        },
        generation: GenerationConfig::new(1),
        qa: default_qa(),
        backend: default_backend(),
        #[cfg(feature = "http")]
        http: None,
        num_knowledge: default_num_knowledge(),
        sweep_grid: default_sweep_grid(),
        flip_count: default_flip_count(),
        annotation: AnnotationExportConfig::default(),
    }
}

pub fn execute(cli: Cli) -> Result<Outcome, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            require(path)?;
            RunConfig::load(path)?
        }
        None => placeholder_config(),
    };
    if let Some(seed) = cli.seed {
        config.generation.seed = seed;
    }
    if let Some(backend) = cli.backend {
        config.backend = backend;
    }
    if let Some(n) = cli.num_knowledge {
        config.num_knowledge = n;
    }
    if cli.config.is_some() {
        config.generation.validate().map_err(|m| CliError::new("invalid_config", m))?;
    }
    let command = command_name(&cli.command).to_string();
    let ctx = Context {
        config,
        config_path: cli.config.clone(),
        out: cli.out.clone(),
        command: command.clone(),
    };
    match cli.command {
        Command::Ingest => ingest(&ctx),
        Command::GenInitial => gen_initial(&ctx),
        Command::Cluster => cluster(&ctx),
        Command::Diversify => diversify_cmd(&ctx),
        Command::Answer => {
            let n = ctx.config()?.num_knowledge;
            let out = ctx.output(&format!("predictions_n{n}.jsonl"))?;
            answer(&ctx, n, &out)
        }
        Command::AnswerCot => answer_cot(&ctx),
        Command::ExportFid => export_fid(&ctx),
        Command::Evaluate { predictions } => {
            let out = ctx.output(&report_name(&predictions))?;
            evaluate(&ctx, &predictions, &out)
        }
        Command::Flips { a, b, n } => flips(&ctx, &a, &b, n),
        Command::ExportAnnotation { flips } => export_annotation(&ctx, &flips),
        Command::Kappa { ratings } => kappa(&ctx, &ratings),
        Command::AggregateRatings { ratings, mode } => aggregate(&ctx, &ratings, mode.into()),
        Command::SweepKnowledge { grid } => sweep(&ctx, grid),
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Ingest => "ingest",
        Command::GenInitial => "gen-initial",
        Command::Cluster => "cluster",
        Command::Diversify => "diversify",
        Command::Answer => "answer",
        Command::AnswerCot => "answer-cot",
        Command::ExportFid => "export-fid",
        Command::Evaluate { .. } => "evaluate",
        Command::Flips { .. } => "flips",
        Command::ExportAnnotation { .. } => "export-annotation",
        Command::Kappa { .. } => "kappa",
        Command::AggregateRatings { .. } => "aggregate-ratings",
        Command::SweepKnowledge { .. } => "sweep-knowledge",
    }
}

/// `predictions_n5.jsonl` -> `report_n5.json`
fn report_name(predictions: &Path) -> String {
    let stem = predictions.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    format!("report_{}.json", stem.strip_prefix("predictions_").unwrap_or(stem))
}

const POOL_FILE: &str = "pool.json";
const CLUSTERS_FILE: &str = "clusters.json";
const KNOWLEDGE_FILE: &str = "knowledge.jsonl";

fn ingest(ctx: &Context) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let paths = &config.paths;
    let mut manifest = ctx.manifest();
    require(&paths.questions)?;
    require(&paths.captions)?;
    let mut dataset = Dataset::load_questions(&paths.questions)?;
    manifest.add_input(&paths.questions).map_err(|e| CliError::io(&paths.questions, e))?;
    let mut missing_annotations = Vec::new();
    if let Some(annotations) = &paths.annotations {
        require(annotations)?;
        missing_annotations = dataset.load_annotations(annotations)?.missing;
        manifest.add_input(annotations).map_err(|e| CliError::io(annotations, e))?;
    }
    let missing_captions = dataset.attach_captions(&paths.captions, config.generation.max_captions)?.missing;
    manifest.add_input(&paths.captions).map_err(|e| CliError::io(&paths.captions, e))?;

    let report = IngestReport {
        dataset_name: dataset.name.clone(),
        num_instances: dataset.len(),
        missing_annotations,
        missing_captions,
    };
    let out = ctx.output("ingest.json")?;
    write_json(&out, &report)?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: 0,
        summary: serde_json::to_value(&report).expect("report serializes"),
    })
}

fn gen_initial(ctx: &Context) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let mut manifest = ctx.manifest();
    let dataset = ctx.load_dataset(&mut manifest)?;
    let backend = ctx.completion_backend()?;
    let output = generate_initial(&dataset, &config.generation, &backend)?;

    let out = ctx.output(POOL_FILE)?;
    let failures_out = out.with_file_name("initial_failures.json");
    write_json(&out, &output.pool)?;
    write_json(&failures_out, &output.failures)?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out, &failures_out])?,
        backend_calls: backend.inner_calls(),
        summary: serde_json::json!({
            "triplets": output.pool.len(),
            "failed": output.failures.count(),
        }),
    })
}

fn cluster(ctx: &Context) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let mut manifest = ctx.manifest();
    let pool_path = config.work(POOL_FILE);
    let pool: TripletPool = read_json(&pool_path)?;
    manifest.add_input(&pool_path).map_err(|e| CliError::io(&pool_path, e))?;
    let embedder = ctx.embedding_backend()?;
    let pool = pool.embed(&embedder)?;
    let model = kmeans_fit(&pool, &config.generation.kmeans_params())?;

    let out = ctx.output(CLUSTERS_FILE)?;
    write_json(&out, &model)?;
    let sizes: Vec<usize> = model.members().iter().map(Vec::len).collect();
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: embedder.inner_calls(),
        summary: serde_json::json!({ "k": model.k, "inertia": model.inertia, "cluster_sizes": sizes }),
    })
}

fn diversify_cmd(ctx: &Context) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let mut manifest = ctx.manifest();
    let dataset = ctx.load_dataset(&mut manifest)?;
    let pool_path = config.work(POOL_FILE);
    let model_path = config.work(CLUSTERS_FILE);
    let pool: TripletPool = read_json(&pool_path)?;
    let model: ClusterModel = read_json(&model_path)?;
    for p in [&pool_path, &model_path] {
        manifest.add_input(p).map_err(|e| CliError::io(p, e))?;
    }
    let backend = ctx.completion_backend()?;
    let output = diversify(&dataset, &pool, &model, &config.generation, &backend)?;

    let out = ctx.output(KNOWLEDGE_FILE)?;
    let failures_out = out.with_file_name("diversify_failures.json");
    let diagnostics_out = out.with_file_name("diversify_diagnostics.json");
    save_knowledge(&output.sets, &out)?;
    write_json(&failures_out, &output.failures)?;
    write_json(
        &diagnostics_out,
        &serde_json::json!({
            "sets": output.sets.len(),
            "failed_draws": output.failures.count(),
            "duplicate_statements": output.duplicates,
        }),
    )?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out, &failures_out, &diagnostics_out])?,
        backend_calls: backend.inner_calls(),
        summary: serde_json::json!({
            "sets": output.sets.len(),
            "failed": output.failures.count(),
            "duplicates": output.duplicates,
        }),
    })
}

fn knowledge_by_id(sets: Vec<KnowledgeSet>) -> BTreeMap<u64, Vec<String>> {
    sets.into_iter().map(|s| (s.question_id, s.statements)).collect()
}

/// Knowledge for every instance; not read at all when `n == 0`.
fn load_knowledge_for(
    ctx: &Context,
    dataset: &Dataset,
    n: usize,
    manifest: &mut Manifest,
) -> Result<Vec<Vec<String>>, CliError> {
    if n == 0 {
        return Ok(vec![Vec::new(); dataset.len()]);
    }
    let path = ctx.config()?.work(KNOWLEDGE_FILE);
    require(&path)?;
    let mut by_id = knowledge_by_id(load_knowledge(&path)?);
    manifest.add_input(&path).map_err(|e| CliError::io(&path, e))?;
    dataset
        .instances
        .iter()
        .map(|inst| {
            by_id
                .remove(&inst.question_id)
                .ok_or_else(|| CliError::new("missing_knowledge", format!("question {}", inst.question_id)))
        })
        .collect()
}

fn answer(ctx: &Context, n: usize, out: &Path) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let mut manifest = ctx.manifest();
    manifest.seeds.insert("num_knowledge".into(), n as u64);
    let dataset = ctx.load_dataset(&mut manifest)?;
    let knowledge = load_knowledge_for(ctx, &dataset, n, &mut manifest)?;
    let backend = ctx.completion_backend()?;
    let items: Vec<usize> = (0..dataset.len()).collect();
    let predictions = map_bounded(&items, config.generation.workers, |_, &i| {
        predict_answer(&dataset.instances[i], &knowledge[i], n, &backend, &config.qa)
    })
    .into_iter()
    .collect::<Result<Vec<AnswerPrediction>, _>>()?;
    jsonl::write_lines(out, &predictions)?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[out])?,
        backend_calls: backend.inner_calls(),
        summary: serde_json::json!({ "predictions": predictions.len(), "num_knowledge": n }),
    })
}

fn answer_cot(ctx: &Context) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let mut manifest = ctx.manifest();
    let dataset = ctx.load_dataset(&mut manifest)?;
    let demos_path = config
        .paths
        .cot_demos
        .as_ref()
        .ok_or_else(|| CliError::new("invalid_config", "answer-cot needs paths.cot_demos"))?;
    let demos: Vec<Demonstration> = read_json(demos_path)?;
    manifest.add_input(demos_path).map_err(|e| CliError::io(demos_path, e))?;
    let backend = ctx.completion_backend()?;
    let predictions = map_bounded(&dataset.instances, config.generation.workers, |_, inst| {
        predict_cot(inst, &demos, &backend, &config.qa)
    })
    .into_iter()
    .collect::<Result<Vec<AnswerPrediction>, _>>()?;
    let out = ctx.output("predictions_cot.jsonl")?;
    jsonl::write_lines(&out, &predictions)?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: backend.inner_calls(),
        summary: serde_json::json!({ "predictions": predictions.len() }),
    })
}

fn export_fid(ctx: &Context) -> Result<Outcome, CliError> {
    let n = ctx.config()?.num_knowledge;
    let mut manifest = ctx.manifest();
    manifest.seeds.insert("num_knowledge".into(), n as u64);
    let dataset = ctx.load_dataset(&mut manifest)?;
    let knowledge = load_knowledge_for(ctx, &dataset, n, &mut manifest)?;
    let out = ctx.output(&format!("fid_n{n}.jsonl"))?;
    let mut writer = FidWriter::create(&out, &FidHeader::default())?;
    for (inst, k) in dataset.instances.iter().zip(&knowledge) {
        writer.export(inst, k, n)?;
    }
    writer.finish()?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: 0,
        summary: serde_json::json!({ "records": dataset.len(), "num_knowledge": n }),
    })
}

fn evaluate(ctx: &Context, predictions_path: &Path, out: &Path) -> Result<Outcome, CliError> {
    let mut manifest = ctx.manifest();
    let dataset = ctx.load_dataset(&mut manifest)?;
    require(predictions_path)?;
    let predictions: Vec<AnswerPrediction> =
        jsonl::read_lines(predictions_path)?.into_iter().map(|l| l.value).collect();
    manifest
        .add_input(predictions_path)
        .map_err(|e| CliError::io(predictions_path, e))?;
    let report = evaluate_run(&predictions, &dataset)?;
    write_json(out, &report)?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[out])?,
        backend_calls: 0,
        summary: serde_json::json!({
            "num_questions": report.num_questions,
            "mean_soft_accuracy": report.mean_soft_accuracy,
        }),
    })
}

fn flips(ctx: &Context, a: &Path, b: &Path, n: Option<usize>) -> Result<Outcome, CliError> {
    let mut manifest = ctx.manifest();
    let report_a: EvalReport = read_json(a)?;
    let report_b: EvalReport = read_json(b)?;
    for p in [a, b] {
        manifest.add_input(p).map_err(|e| CliError::io(p, e))?;
    }
    let n = n.unwrap_or(ctx.config.flip_count);
    let seed = ctx.config.generation.seed;
    let question_ids = select_flip_cases(&report_a, &report_b, n, seed)?;
    let out = ctx.output("flips.json")?;
    write_json(&out, &FlipList { question_ids: question_ids.clone() })?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: 0,
        summary: serde_json::json!({ "flips": question_ids.len() }),
    })
}

fn export_annotation(ctx: &Context, flips_path: &Path) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let mut manifest = ctx.manifest();
    let dataset = ctx.load_dataset(&mut manifest)?;
    let flips: FlipList = read_json(flips_path)?;
    manifest.add_input(flips_path).map_err(|e| CliError::io(flips_path, e))?;
    let knowledge_path = config.work(KNOWLEDGE_FILE);
    require(&knowledge_path)?;
    let knowledge = load_knowledge(&knowledge_path)?;
    manifest
        .add_input(&knowledge_path)
        .map_err(|e| CliError::io(&knowledge_path, e))?;
    let out = ctx.output("annotation_tasks.json")?;
    let tasks = export_annotation_tasks(
        &flips.question_ids,
        &dataset,
        &knowledge,
        config.annotation.sample_per_question,
        config.generation.seed,
        &config.annotation.image_ref_template,
        &out,
    )?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: 0,
        summary: serde_json::json!({ "tasks": tasks.len() }),
    })
}

fn kappa(ctx: &Context, ratings_path: &Path) -> Result<Outcome, CliError> {
    let mut manifest = ctx.manifest();
    require(ratings_path)?;
    let ratings = import_ratings(ratings_path)?;
    manifest.add_input(ratings_path).map_err(|e| CliError::io(ratings_path, e))?;
    let per_metric = kappa_tables(&ratings.annotations)?;
    let mean_kappa = per_metric.iter().map(|m| m.kappa).sum::<f64>() / per_metric.len() as f64;
    let report = KappaReport { per_metric, mean_kappa };
    let out = ctx.output("kappa.json")?;
    write_json(&out, &report)?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: 0,
        summary: serde_json::to_value(&report).expect("report serializes"),
    })
}

fn aggregate(ctx: &Context, ratings_path: &Path, mode: AggregateMode) -> Result<Outcome, CliError> {
    let mut manifest = ctx.manifest();
    require(ratings_path)?;
    let ratings = import_ratings(ratings_path)?;
    manifest.add_input(ratings_path).map_err(|e| CliError::io(ratings_path, e))?;
    let report = RatingsReport {
        scores: aggregate_ratings(&ratings.annotations, mode)?,
        mean_distinct_statements: ratings.mean_diversity(),
    };
    let name = match mode {
        AggregateMode::Avg => "ratings_avg.json",
        AggregateMode::Max => "ratings_max.json",
    };
    let out = ctx.output(name)?;
    write_json(&out, &report)?;
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs: finish(manifest, &[&out])?,
        backend_calls: 0,
        summary: serde_json::to_value(&report).expect("report serializes"),
    })
}

fn sweep(ctx: &Context, grid: Option<Vec<usize>>) -> Result<Outcome, CliError> {
    let config = ctx.config()?;
    let grid = grid.unwrap_or_else(|| config.sweep_grid.clone());
    if grid.is_empty() {
        return Err(CliError::new("usage", "empty knowledge grid"));
    }
    let mut entries = Vec::with_capacity(grid.len());
    let mut outputs = Vec::new();
    let mut backend_calls = 0;
    for &n in &grid {
        let predictions = config.work(&format!("predictions_n{n}.jsonl"));
        let report = config.work(&format!("report_n{n}.json"));
        backend_calls += answer(ctx, n, &predictions)?.backend_calls;
        evaluate(ctx, &predictions, &report)?;
        let parsed: EvalReport = read_json(&report)?;
        entries.push(SweepEntry {
            num_knowledge: n,
            mean_soft_accuracy: parsed.mean_soft_accuracy,
            predictions: predictions.clone(),
            report: report.clone(),
        });
        outputs.push(predictions);
        outputs.push(report);
    }
    let out = ctx.output("sweep.json")?;
    write_json(&out, &entries)?;
    let mut manifest = ctx.manifest();
    for p in &outputs {
        manifest.add_input(p).map_err(|e| CliError::io(p, e))?;
    }
    finish(manifest, &[&out])?;
    outputs.insert(0, out);
    Ok(Outcome {
        command: ctx.command.clone(),
        outputs,
        backend_calls,
        summary: serde_json::to_value(&entries).expect("entries serialize"),
    })
}
