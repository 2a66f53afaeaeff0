//! End-to-end commands over a TOML pipeline config.
//!
//! Every command writes its artifacts under `output_dir` and stamps each
//! record with the config hash, seed and toolkit version. Nothing
//! time-dependent is written, so identical config and seed give
//! byte-identical outputs with the hashed provider.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    self, AnnotatedText, BatchMode, ClassifierError, Evaluation, LabeledExample, LinearClassifier, TrainConfig,
};
use crate::cluster::{self, ClusterError, ClusterHistogram, DEFAULT_FIT_SAMPLE, DEFAULT_K, DEFAULT_MAX_ITERS};
use crate::corpus::{self, CorpusError, CorpusManifest, Document, SamplingStrategy, DEFAULT_SAMPLE_DOCS};
use crate::embedding::{
    build_provider, l2_normalize, EmbeddingError, EmbeddingProvider, EmbeddingProviderConfig, EmbeddingVector,
};
use crate::planner::{self, BudgetEntry, DatasetBudget, LanguageWeight, ParamsBasis, PlanError, TrainingPlan};
use crate::provenance::{sha256_hex, Provenance};
use crate::threshold::{
    self, FilterStats, ScoreCache, SamplingComparison, ThresholdError, ThresholdEstimate, PERCENTILE_PRESETS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Remote,
    Io,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Io => 1,
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Remote => 4,
        }
    }
}

fn embedding_kind(e: &EmbeddingError) -> FailureKind {
    match e {
        EmbeddingError::RemoteUnavailable(_) | EmbeddingError::Protocol(_) => FailureKind::Remote,
        EmbeddingError::InvalidConfig(_) => FailureKind::Config,
        _ => FailureKind::Data,
    }
}

fn threshold_kind(e: &ThresholdError) -> FailureKind {
    match e {
        ThresholdError::Embedding(inner) => embedding_kind(inner),
        ThresholdError::ShardFailed { source, .. } => threshold_kind(source),
        ThresholdError::Io { .. } => FailureKind::Io,
        ThresholdError::Corpus(c) => corpus_kind(c),
        _ => FailureKind::Data,
    }
}

fn corpus_kind(e: &CorpusError) -> FailureKind {
    match e {
        CorpusError::Io { .. } => FailureKind::Io,
        CorpusError::InvalidManifest(_) | CorpusError::InvalidSample(_) => FailureKind::Config,
        _ => FailureKind::Data,
    }
}

impl PipelineError {
    pub fn kind(&self) -> FailureKind {
        match self {
            PipelineError::Config(_) => FailureKind::Config,
            PipelineError::Io { .. } => FailureKind::Io,
            PipelineError::Corpus(e) => corpus_kind(e),
            PipelineError::Embedding(e) => embedding_kind(e),
            PipelineError::Threshold(e) => threshold_kind(e),
            PipelineError::Classifier(ClassifierError::InvalidConfig(_)) => FailureKind::Config,
            PipelineError::Classifier(ClassifierError::Io { .. }) => FailureKind::Io,
            PipelineError::Plan(PlanError::InvalidPlan(_)) => FailureKind::Config,
            PipelineError::Classifier(_) | PipelineError::Cluster(_) | PipelineError::Plan(_) => FailureKind::Data,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedFormat {
    /// Records `{text, label, origin?}` with label 0 or 1.
    #[default]
    Labeled,
    /// Records `{text, score}` with a 0–5 annotation, binarized at 2.
    Fwe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFile {
    pub path: PathBuf,
    #[serde(default)]
    pub format: SeedFormat,
    /// Origin tag for records that carry none; defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

fn default_l2() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    2000
}
fn default_lr() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub seed_files: Vec<SeedFile>,
    #[serde(default = "default_l2")]
    pub l2_lambda: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    /// Minibatch size; full-batch descent when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch: Option<usize>,
    #[serde(default = "default_true")]
    pub normalize_inputs: bool,
    /// Fraction of seed examples held out for evaluation; 0 evaluates on
    /// the training set.
    #[serde(default)]
    pub holdout_fraction: f64,
}

fn default_percentiles() -> Vec<f64> {
    PERCENTILE_PRESETS.to_vec()
}
fn default_max_docs() -> usize {
    DEFAULT_SAMPLE_DOCS
}
fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::FirstFile
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    #[serde(default = "default_percentiles")]
    pub percentiles: Vec<f64>,
    #[serde(default = "default_strategy")]
    pub strategy: SamplingStrategy,
    #[serde(default = "default_max_docs")]
    pub max_docs: usize,
    /// When set, also compare the first-file estimate against this many
    /// seeded random shards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_random_files: Option<usize>,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec {
            percentiles: default_percentiles(),
            strategy: default_strategy(),
            max_docs: default_max_docs(),
            compare_random_files: None,
        }
    }
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_cluster_iters() -> usize {
    DEFAULT_MAX_ITERS
}
fn default_fit_sample() -> usize {
    DEFAULT_FIT_SAMPLE
}
fn default_fit_files() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_cluster_iters")]
    pub max_iters: usize,
    #[serde(default = "default_fit_sample")]
    pub fit_sample: usize,
    /// Number of random shards of the fit corpus to draw the fit sample from.
    #[serde(default = "default_fit_files")]
    pub fit_files: usize,
    /// Corpus name to fit on; the first configured corpus by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_corpus: Option<String>,
    /// Documents per dataset to histogram.
    #[serde(default = "default_fit_sample")]
    pub max_docs_per_dataset: usize,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            k: default_k(),
            max_iters: default_cluster_iters(),
            fit_sample: default_fit_sample(),
            fit_files: default_fit_files(),
            fit_corpus: None,
            max_docs_per_dataset: default_fit_sample(),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: u64,
    #[serde(default = "default_context")]
    pub context_len: u64,
    pub languages: Vec<LanguageWeight>,
    /// Parameter count, or a preset name such as "1.3B".
    pub model: ModelSize,
    #[serde(default)]
    pub params_basis: ParamsBasis,
    /// Budget table; [`planner::reference_budgets`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<BudgetEntry>>,
}

fn default_batch() -> u64 {
    1024
}
fn default_context() -> u64 {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSize {
    Params(f64),
    Preset(String),
}

impl ModelSize {
    fn params(&self) -> Result<f64, PipelineError> {
        match self {
            ModelSize::Params(p) => Ok(*p),
            ModelSize::Preset(name) => planner::model_preset(name)
                .ok_or_else(|| PipelineError::Config(format!("unknown model preset `{name}`"))),
        }
    }
}

fn default_embedding() -> EmbeddingProviderConfig {
    EmbeddingProviderConfig::hashed(crate::embedding::DEFAULT_DIM, (1, 3), 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Corpus manifest files.
    #[serde(default)]
    pub corpora: Vec<PathBuf>,
    /// Classifier file to read (score/filter) or write (train-filter);
    /// `<output_dir>/classifier.json` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<PathBuf>,
    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingProviderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub threshold: ThresholdSpec,
    #[serde(default)]
    pub clusters: ClusterSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSpec>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                PipelineError::Config(format!("config file {} not found", path.display()))
            } else {
                io_err(path)(e)
            }
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.corpora.iter_mut().for_each(fix);
        if let Some(c) = self.classifier.as_mut() {
            fix(c);
        }
        if let Some(t) = self.train.as_mut() {
            t.seed_files.iter_mut().for_each(|s| fix(&mut s.path));
        }
    }

    /// Hash of the effective configuration.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.config_hash(), self.seed)
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.classifier
            .clone()
            .unwrap_or_else(|| self.output_dir.join("classifier.json"))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.embedding.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for m in &self.corpora {
            if !m.is_file() {
                return Err(PipelineError::Config(format!("manifest {} does not exist", m.display())));
            }
        }
        if let Some(t) = &self.train {
            if t.seed_files.is_empty() {
                return Err(PipelineError::Config("train.seed_files is empty".into()));
            }
            for s in &t.seed_files {
                if !s.path.is_file() {
                    return Err(PipelineError::Config(format!("seed file {} does not exist", s.path.display())));
                }
            }
            if !(0.0..1.0).contains(&t.holdout_fraction) {
                return Err(PipelineError::Config("train.holdout_fraction must be in [0, 1)".into()));
            }
        }
        for &p in &self.threshold.percentiles {
            if !(p > 0.0 && p < 100.0) {
                return Err(PipelineError::Config(format!("percentile {p} outside (0, 100)")));
            }
        }
        if self.threshold.max_docs == 0 {
            return Err(PipelineError::Config("threshold.max_docs must be positive".into()));
        }
        if self.clusters.k == 0 {
            return Err(PipelineError::Config("clusters.k must be positive".into()));
        }
        Ok(())
    }

    fn require_corpora(&self) -> Result<Vec<CorpusManifest>, PipelineError> {
        if self.corpora.is_empty() {
            return Err(PipelineError::Config("no corpora configured".into()));
        }
        self.corpora
            .iter()
            .map(|p| CorpusManifest::load(p).map_err(PipelineError::from))
            .collect()
    }

    fn train_config(&self, spec: &TrainSpec) -> TrainConfig {
        TrainConfig {
            l2_lambda: spec.l2_lambda,
            max_epochs: spec.max_epochs,
            learning_rate: spec.learning_rate,
            tolerance: spec.tolerance,
            batch_mode: match spec.minibatch {
                Some(size) => BatchMode::Minibatch { size },
                None => BatchMode::Full,
            },
            seed: self.seed,
            normalize_inputs: spec.normalize_inputs,
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("report serializes");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

/// A report record stamped with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    #[serde(flatten)]
    pub record: T,
    #[serde(flatten)]
    pub provenance: Provenance,
}

/// Embeds documents in parallel chunks, preserving order.
pub fn embed_documents(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let chunks: Vec<Vec<EmbeddingVector>> = texts
        .par_chunks(provider.batch_size().max(1))
        .map(|c| provider.embed_batch(c))
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabeledRecord {
    text: String,
    label: u8,
    #[serde(default)]
    origin: Option<String>,
}

/// Loads seed texts with binary labels and origin tags.
pub fn load_seed_texts(files: &[SeedFile]) -> Result<Vec<(String, u8, String)>, PipelineError> {
    let mut out = Vec::new();
    for f in files {
        let default_origin = f.origin.clone().unwrap_or_else(|| {
            f.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "seed".into())
        });
        let text = std::fs::read_to_string(&f.path).map_err(io_err(&f.path))?;
        let mut annotations = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| {
                PipelineError::Config(format!("{}:{}: {e}", f.path.display(), i + 1))
            };
            match f.format {
                SeedFormat::Labeled => {
                    let r: LabeledRecord = serde_json::from_str(line).map_err(bad)?;
                    if r.label > 1 {
                        return Err(ClassifierError::InvalidLabel(r.label).into());
                    }
                    out.push((r.text, r.label, r.origin.unwrap_or_else(|| default_origin.clone())));
                }
                SeedFormat::Fwe => annotations.push(serde_json::from_str::<AnnotatedText>(line).map_err(bad)?),
            }
        }
        for (text, y) in classifier::binarize_fwe_annotations(&annotations)? {
            out.push((text, y, default_origin.clone()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReportRecord {
    pub classifier_path: String,
    pub trained_on: String,
    pub dim: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub eval_split: String,
    #[serde(flatten)]
    pub evaluation: Evaluation,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub converged: bool,
    pub provider: String,
}

#[derive(Debug, Clone)]
pub struct TrainFilterOutput {
    pub classifier_path: PathBuf,
    pub report_path: PathBuf,
    pub report: TrainReportRecord,
}

pub fn cmd_train_filter(cfg: &PipelineConfig) -> Result<TrainFilterOutput, PipelineError> {
    cfg.validate()?;
    let spec = cfg
        .train
        .as_ref()
        .ok_or_else(|| PipelineError::Config("missing [train] section".into()))?;
    let seeds = load_seed_texts(&spec.seed_files)?;
    if seeds.is_empty() {
        return Err(ClassifierError::EmptyData.into());
    }
    let provider = build_provider(&cfg.embedding)?;
    let texts: Vec<&str> = seeds.iter().map(|(t, _, _)| t.as_str()).collect();
    let vectors = embed_documents(provider.as_ref(), &texts)?;
    let examples = vectors
        .into_iter()
        .zip(&seeds)
        .map(|(x, (_, y, origin))| LabeledExample::new(x, *y, origin.clone()))
        .collect::<Result<Vec<_>, _>>()?;

    let (train, eval, split) = if spec.holdout_fraction > 0.0 {
        let mut idx: Vec<usize> = (0..examples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
        let n_eval = ((examples.len() as f64) * spec.holdout_fraction).round() as usize;
        let (e, t) = idx.split_at(n_eval.min(examples.len() - 1));
        let pick = |ids: &[usize]| ids.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
        (pick(t), pick(e), "holdout")
    } else {
        (examples.clone(), examples, "train")
    };

    let report = classifier::train_logistic_report(&train, &cfg.train_config(spec))?;
    let mut clf = report.classifier;
    clf.trained_on = format!("seed[{}]", clf.trained_on);
    let evaluation = classifier::evaluate(&clf, &eval)?;

    let clf_path = cfg.classifier_path();
    if let Some(parent) = clf_path.parent() {
        ensure_dir(parent)?;
    }
    clf.save(&clf_path)?;

    let record = TrainReportRecord {
        classifier_path: clf_path.display().to_string(),
        trained_on: clf.trained_on.clone(),
        dim: clf.dim,
        n_train: train.len(),
        n_eval: eval.len(),
        eval_split: split.to_string(),
        evaluation,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        epochs: report.epochs,
        converged: report.converged,
        provider: cfg.embedding.fingerprint(),
    };
    let report_path = cfg.output_dir.join("train_report.jsonl");
    write_jsonl(
        &report_path,
        &[Stamped {
            record: record.clone(),
            provenance: cfg.provenance(),
        }],
    )?;
    Ok(TrainFilterOutput {
        classifier_path: clf_path,
        report_path,
        report: record,
    })
}

fn load_classifier(cfg: &PipelineConfig) -> Result<LinearClassifier, PipelineError> {
    let path = cfg.classifier_path();
    if !path.is_file() {
        return Err(PipelineError::Config(format!(
            "classifier {} does not exist; run train-filter first",
            path.display()
        )));
    }
    let clf = LinearClassifier::load(&path)?;
    if clf.dim != cfg.embedding.dim {
        return Err(ClassifierError::DimensionMismatch {
            expected: clf.dim,
            actual: cfg.embedding.dim,
        }
        .into());
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFileRecord {
    pub corpus_name: String,
    pub scores_path: String,
    pub documents: usize,
    pub cached: bool,
}

/// Scores every configured corpus through the on-disk score cache.
pub fn cmd_score(cfg: &PipelineConfig) -> Result<Vec<(CorpusManifest, PathBuf)>, PipelineError> {
    cfg.validate()?;
    let manifests = cfg.require_corpora()?;
    let clf = load_classifier(cfg)?;
    let provider = build_provider(&cfg.embedding)?;
    let cache = ScoreCache::new(cfg.output_dir.join("scores"));
    let fingerprint = cfg.embedding.fingerprint();
    let mut out = Vec::new();
    let mut records = Vec::new();
    for m in manifests {
        let (path, cached) = cache.get_or_score(&m, provider.as_ref(), &fingerprint, &clf)?;
        let documents = threshold::read_scores(&path)?.len();
        records.push(Stamped {
            record: ScoreFileRecord {
                corpus_name: m.corpus_name.clone(),
                scores_path: path.display().to_string(),
                documents,
                cached,
            },
            provenance: cfg.provenance(),
        });
        out.push((m, path));
    }
    // the cached flag varies between runs, so it is not part of the report
    let stable: Vec<_> = records
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.record.cached = false;
            s
        })
        .collect();
    write_jsonl(&cfg.output_dir.join("scores.jsonl"), &stable)?;
    Ok(out)
}

/// Scores of the documents a sampling strategy selects, looked up in a
/// score map.
pub fn sampled_scores(
    manifest: &CorpusManifest,
    strategy: SamplingStrategy,
    max_docs: usize,
    scores: &HashMap<String, f64>,
) -> Result<Vec<f64>, PipelineError> {
    let docs: Vec<Document> = corpus::sample_documents(manifest, strategy, max_docs)?;
    docs.iter()
        .map(|d| {
            scores
                .get(&d.id)
                .copied()
                .ok_or_else(|| ThresholdError::MissingScore(d.id.clone()).into())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ThresholdOutput {
    pub estimates: Vec<ThresholdEstimate>,
    pub comparisons: Vec<SamplingComparison>,
}

fn thresholds_for(
    cfg: &PipelineConfig,
    scored: &[(CorpusManifest, PathBuf)],
) -> Result<(ThresholdOutput, Vec<HashMap<String, f64>>), PipelineError> {
    let mut estimates = Vec::new();
    let mut comparisons = Vec::new();
    let mut maps = Vec::new();
    for (m, path) in scored {
        let map = threshold::load_score_map(path)?;
        let sample = sampled_scores(m, cfg.threshold.strategy, cfg.threshold.max_docs, &map)?;
        for &p in &cfg.threshold.percentiles {
            estimates.push(ThresholdEstimate::from_scores(
                &m.corpus_name,
                &cfg.threshold.strategy,
                &sample,
                p,
            )?);
        }
        if let Some(n) = cfg.threshold.compare_random_files {
            let random = SamplingStrategy::RandomFiles { n, seed: cfg.seed };
            let first_scores = sampled_scores(m, SamplingStrategy::FirstFile, cfg.threshold.max_docs, &map)?;
            let random_scores = sampled_scores(m, random, cfg.threshold.max_docs, &map)?;
            for &p in &cfg.threshold.percentiles {
                comparisons.push(threshold::compare_estimates(
                    ThresholdEstimate::from_scores(&m.corpus_name, &SamplingStrategy::FirstFile, &first_scores, p)?,
                    ThresholdEstimate::from_scores(&m.corpus_name, &random, &random_scores, p)?,
                ));
            }
        }
        maps.push(map);
    }
    Ok((ThresholdOutput { estimates, comparisons }, maps))
}

/// Percentile-by-corpus grid of τ values.
pub fn threshold_table_csv(estimates: &[ThresholdEstimate]) -> String {
    let mut corpora: Vec<&str> = Vec::new();
    let mut percentiles: Vec<f64> = Vec::new();
    for e in estimates {
        if !corpora.contains(&e.corpus_name.as_str()) {
            corpora.push(&e.corpus_name);
        }
        if !percentiles.contains(&e.percentile) {
            percentiles.push(e.percentile);
        }
    }
    percentiles.sort_by(|a, b| b.total_cmp(a));
    let mut out = String::from("percentile");
    for c in &corpora {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for p in percentiles {
        let _ = write!(out, "{p}");
        for c in &corpora {
            match estimates.iter().find(|e| e.corpus_name == *c && e.percentile == p) {
                Some(e) => {
                    let _ = write!(out, ",{:.4}", e.tau);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn write_threshold_reports(cfg: &PipelineConfig, out: &ThresholdOutput) -> Result<(), PipelineError> {
    let stamp = |e: &ThresholdEstimate| Stamped {
        record: e.clone(),
        provenance: cfg.provenance(),
    };
    write_jsonl(
        &cfg.output_dir.join("thresholds.jsonl"),
        &out.estimates.iter().map(stamp).collect::<Vec<_>>(),
    )?;
    write_file(
        &cfg.output_dir.join("thresholds.csv"),
        threshold_table_csv(&out.estimates).as_bytes(),
    )?;
    if !out.comparisons.is_empty() {
        let recs: Vec<_> = out
            .comparisons
            .iter()
            .map(|c| Stamped {
                record: c.clone(),
                provenance: cfg.provenance(),
            })
            .collect();
        write_jsonl(&cfg.output_dir.join("sampling_comparison.jsonl"), &recs)?;
    }
    Ok(())
}

pub fn cmd_threshold(cfg: &PipelineConfig) -> Result<ThresholdOutput, PipelineError> {
    let scored = cmd_score(cfg)?;
    let (out, _) = thresholds_for(cfg, &scored)?;
    write_threshold_reports(cfg, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReportRecord {
    pub corpus_name: String,
    pub percentile: f64,
    pub output_dir: String,
    #[serde(flatten)]
    pub stats: FilterStats,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub thresholds: ThresholdOutput,
    pub reports: Vec<FilterReportRecord>,
}

fn percentile_dir_name(p: f64) -> String {
    format!("p{p}")
}

fn histogram_csv(reports: &[FilterReportRecord]) -> String {
    let mut out = String::from("bin_lo,bin_hi");
    let mut seen: Vec<&str> = Vec::new();
    let mut cols: Vec<&FilterReportRecord> = Vec::new();
    for r in reports {
        if !seen.contains(&r.corpus_name.as_str()) {
            seen.push(&r.corpus_name);
            cols.push(r);
            let _ = write!(out, ",{}", r.corpus_name);
        }
    }
    out.push('\n');
    let bins = threshold::HISTOGRAM_BINS;
    for b in 0..bins {
        let _ = write!(out, "{:.2},{:.2}", b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        for r in &cols {
            let _ = write!(out, ",{}", r.stats.score_histogram[b]);
        }
        out.push('\n');
    }
    out
}

pub fn cmd_filter_corpus(cfg: &PipelineConfig) -> Result<FilterOutput, PipelineError> {
    let scored = cmd_score(cfg)?;
    let (thresholds, maps) = thresholds_for(cfg, &scored)?;
    write_threshold_reports(cfg, &thresholds)?;
    let mut reports = Vec::new();
    for ((m, _), map) in scored.iter().zip(&maps) {
        for est in thresholds.estimates.iter().filter(|e| e.corpus_name == m.corpus_name) {
            let dir = cfg
                .output_dir
                .join("filtered")
                .join(&m.corpus_name)
                .join(percentile_dir_name(est.percentile));
            let stats = threshold::apply_filter_with_scores(m, map, est.tau, &dir)?;
            reports.push(FilterReportRecord {
                corpus_name: m.corpus_name.clone(),
                percentile: est.percentile,
                output_dir: dir.display().to_string(),
                stats,
            });
        }
    }
    let stamped: Vec<_> = reports
        .iter()
        .map(|r| Stamped {
            record: r.clone(),
            provenance: cfg.provenance(),
        })
        .collect();
    write_jsonl(&cfg.output_dir.join("filter_stats.jsonl"), &stamped)?;
    write_file(&cfg.output_dir.join("score_histogram.csv"), histogram_csv(&reports).as_bytes())?;
    Ok(FilterOutput { thresholds, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub histograms: Vec<ClusterHistogram>,
    pub tv_matrix: Vec<Vec<f64>>,
    pub fit_corpus: String,
    pub fit_points: usize,
    pub iterations: usize,
    pub final_wcss: f64,
}

fn embed_for_clustering(
    provider: &dyn EmbeddingProvider,
    docs: &[Document],
    normalize: bool,
) -> Result<Vec<EmbeddingVector>, PipelineError> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let vectors = embed_documents(provider, &texts)?;
    Ok(if normalize {
        vectors
            .into_iter()
            .map(|v| if v.is_zero() { v } else { l2_normalize(&v).expect("nonzero") })
            .collect()
    } else {
        vectors
    })
}

pub fn histogram_csv_for_clusters(hists: &[ClusterHistogram]) -> String {
    let mut out = String::from("cluster");
    for h in hists {
        let _ = write!(out, ",{}", h.dataset_name);
    }
    out.push('\n');
    let k = hists.first().map_or(0, |h| h.k);
    for j in 0..k {
        let _ = write!(out, "{j}");
        for h in hists {
            let _ = write!(out, ",{}", h.counts[j]);
        }
        out.push('\n');
    }
    out
}

pub fn tv_matrix_csv(names: &[&str], m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for n in names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for (n, row) in names.iter().zip(m) {
        out.push_str(n);
        for v in row {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_diagnose_clusters(cfg: &PipelineConfig) -> Result<ClusterReport, PipelineError> {
    cfg.validate()?;
    let manifests = cfg.require_corpora()?;
    let spec = &cfg.clusters;
    let fit_manifest = match &spec.fit_corpus {
        Some(name) => manifests
            .iter()
            .find(|m| &m.corpus_name == name)
            .ok_or_else(|| PipelineError::Config(format!("fit corpus `{name}` not configured")))?,
        None => &manifests[0],
    };
    let provider = build_provider(&cfg.embedding)?;
    let n_files = spec.fit_files.clamp(1, fit_manifest.shard_paths().len());
    let fit_docs = corpus::sample_documents(
        fit_manifest,
        SamplingStrategy::RandomFiles {
            n: n_files,
            seed: cfg.seed,
        },
        spec.fit_sample,
    )?;
    let fit_points = embed_for_clustering(provider.as_ref(), &fit_docs, spec.normalize)?;
    let fit = cluster::fit_balanced_kmeans(&fit_points, spec.k, cfg.seed, spec.max_iters)?;

    let mut histograms = Vec::new();
    for m in &manifests {
        let docs = corpus::sample_documents(
            m,
            SamplingStrategy::RandomFiles {
                n: m.shard_paths().len(),
                seed: cfg.seed,
            },
            spec.max_docs_per_dataset,
        )?;
        let points = embed_for_clustering(provider.as_ref(), &docs, spec.normalize)?;
        histograms.push(cluster::histogram_over_points(&fit.model, &points, &m.corpus_name)?);
    }
    let tv_matrix = cluster::distance_matrix(&histograms)?;

    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    fit.model.save(dir.join("cluster_model.json"))?;
    let stamped: Vec<_> = histograms
        .iter()
        .map(|h| Stamped {
            record: h.clone(),
            provenance: cfg.provenance(),
        })
        .collect();
    write_jsonl(&dir.join("cluster_histograms.jsonl"), &stamped)?;
    write_file(
        &dir.join("cluster_histograms.csv"),
        histogram_csv_for_clusters(&histograms).as_bytes(),
    )?;
    let names: Vec<String> = histograms.iter().map(|h| h.dataset_name.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_file(&dir.join("tv_matrix.csv"), tv_matrix_csv(&name_refs, &tv_matrix).as_bytes())?;

    let report = ClusterReport {
        fit_corpus: fit_manifest.corpus_name.clone(),
        fit_points: fit_points.len(),
        iterations: fit.iterations,
        final_wcss: fit.history.last().map_or(0.0, |h| h.wcss),
        histograms,
        tv_matrix,
    };
    write_jsonl(
        &dir.join("cluster_report.jsonl"),
        &[Stamped {
            record: serde_json::json!({
                "fit_corpus": report.fit_corpus,
                "fit_points": report.fit_points,
                "K": spec.k,
                "iterations": report.iterations,
                "final_wcss": report.final_wcss,
                "datasets": names,
                "tv_matrix": report.tv_matrix,
            }),
            provenance: cfg.provenance(),
        }],
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub total_tokens: u128,
    pub chinchilla_multiple: f64,
    pub model_params: f64,
    pub params_basis: ParamsBasis,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub summary: PlanSummary,
    pub rows: Vec<DatasetBudget>,
}

pub fn cmd_plan(cfg: &PipelineConfig) -> Result<PlanOutput, PipelineError> {
    let spec = cfg
        .plan
        .as_ref()
        .ok_or_else(|| PipelineError::Config("missing [plan] section".into()))?;
    let plan = TrainingPlan {
        steps: spec.steps,
        batch_size: spec.batch_size,
        context_len: spec.context_len,
        languages: spec.languages.clone(),
        model_params: spec.model.params()?,
        params_basis: spec.params_basis,
    };
    let budgets = spec.budgets.clone().unwrap_or_else(planner::reference_budgets);
    let rows = planner::plan_mix(&plan, &budgets)?;
    let summary = PlanSummary {
        total_tokens: plan.total_tokens()?,
        chinchilla_multiple: plan.chinchilla_multiple()?,
        model_params: plan.model_params,
        params_basis: plan.params_basis,
        rows: rows.len(),
    };
    let dir = &cfg.output_dir;
    let stamped: Vec<_> = rows
        .iter()
        .map(|r| Stamped {
            record: r.clone(),
            provenance: cfg.provenance(),
        })
        .collect();
    write_jsonl(&dir.join("plan.jsonl"), &stamped)?;
    write_jsonl(
        &dir.join("plan_summary.jsonl"),
        &[Stamped {
            record: summary.clone(),
            provenance: cfg.provenance(),
        }],
    )?;
    write_file(&dir.join("plan.csv"), planner::budget_table_csv(&rows).as_bytes())?;
    write_file(&dir.join("plan.md"), planner::budget_table_markdown(&rows).as_bytes())?;
    Ok(PlanOutput { summary, rows })
}

fn read_jsonl_values(path: &Path) -> Result<Vec<serde_json::Value>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Collects whichever report artifacts exist in the output directory into a
/// human-readable `summary.md`.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let dir = &cfg.output_dir;
    let prov = cfg.provenance();
    let mut out = String::new();
    let _ = writeln!(out, "# Filtering report\n");
    let _ = writeln!(
        out,
        "config `{}`, seed {}, toolkit {}\n",
        &prov.config_hash[..16],
        prov.seed,
        prov.toolkit_version
    );
    let f = |x: &serde_json::Value| x.as_f64().unwrap_or(f64::NAN);
    let s = |x: &serde_json::Value| x.as_str().unwrap_or("").to_string();

    let path = dir.join("train_report.jsonl");
    if path.is_file() {
        let _ = writeln!(out, "## Classifier\n");
        for r in read_jsonl_values(&path)? {
            let _ = writeln!(
                out,
                "- trained on {} (n={}), {} accuracy {:.4}, AUC {}, final loss {:.6}",
                s(&r["trained_on"]),
                r["n_train"],
                s(&r["eval_split"]),
                f(&r["accuracy"]),
                r.get("auc").map_or("n/a".into(), |a| format!("{:.4}", f(a))),
                f(&r["final_loss"]),
            );
        }
        out.push('\n');
    }
    let path = dir.join("thresholds.jsonl");
    if path.is_file() {
        let _ = writeln!(out, "## Thresholds\n");
        for r in read_jsonl_values(&path)? {
            let _ = writeln!(
                out,
                "- {} p{}: tau {:.4} from {} docs ({})",
                s(&r["corpus_name"]),
                f(&r["percentile"]),
                f(&r["tau"]),
                r["sample_size"],
                s(&r["strategy"]),
            );
        }
        out.push('\n');
    }
    let path = dir.join("sampling_comparison.jsonl");
    if path.is_file() {
        let _ = writeln!(out, "## Sampling strategy agreement\n");
        for r in read_jsonl_values(&path)? {
            let _ = writeln!(
                out,
                "- {} p{}: first {:.4} vs random {:.4}, rel diff {:.3}{}",
                s(&r["first"]["corpus_name"]),
                f(&r["first"]["percentile"]),
                f(&r["tau_first"]),
                f(&r["tau_random"]),
                f(&r["rel_diff"]),
                if r["flagged"].as_bool() == Some(true) { " FLAGGED" } else { "" },
            );
        }
        out.push('\n');
    }
    let path = dir.join("filter_stats.jsonl");
    if path.is_file() {
        let _ = writeln!(out, "## Filtering\n");
        for r in read_jsonl_values(&path)? {
            let _ = writeln!(
                out,
                "- {} p{}: kept {}/{} (retention {:.4}) above tau {:.4}",
                s(&r["corpus_name"]),
                f(&r["percentile"]),
                r["docs_out"],
                r["docs_in"],
                f(&r["retention"]),
                f(&r["tau"]),
            );
        }
        out.push('\n');
    }
    let path = dir.join("cluster_report.jsonl");
    if path.is_file() {
        let _ = writeln!(out, "## Cluster diagnostics\n");
        for r in read_jsonl_values(&path)? {
            let _ = writeln!(
                out,
                "- K={} fitted on {} points of {} ({} iterations)",
                r["K"],
                r["fit_points"],
                s(&r["fit_corpus"]),
                r["iterations"],
            );
            if let (Some(names), Some(m)) = (r["datasets"].as_array(), r["tv_matrix"].as_array()) {
                for (i, a) in names.iter().enumerate() {
                    for (j, b) in names.iter().enumerate().skip(i + 1) {
                        let _ = writeln!(out, "  - TV({}, {}) = {:.4}", s(a), s(b), f(&m[i][j]));
                    }
                }
            }
        }
        out.push('\n');
    }
    let path = dir.join("plan.md");
    if path.is_file() {
        let _ = writeln!(out, "## Token plan\n");
        if let Ok(summary) = read_jsonl_values(&dir.join("plan_summary.jsonl")) {
            for r in summary {
                let _ = writeln!(
                    out,
                    "{} tokens, {:.2}x Chinchilla\n",
                    r["total_tokens"],
                    f(&r["chinchilla_multiple"])
                );
            }
        }
        out.push_str(&std::fs::read_to_string(&path).map_err(io_err(&path))?);
        out.push('\n');
    }
    let summary_path = dir.join("summary.md");
    let mut file = std::fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    file.write_all(out.as_bytes()).map_err(io_err(&summary_path))?;
    Ok(out)
}
