//! Corpus scoring, percentile thresholds and the strict `score > tau`
//! selection rule.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, LinearClassifier};
use crate::corpus::{self, CorpusError, CorpusManifest, Document, SamplingStrategy, ShardReader};
use crate::embedding::{EmbeddingError, EmbeddingProvider};
use crate::provenance::sha256_hex;

/// Percentiles swept by default; 90 is the headline setting.
pub const PERCENTILE_PRESETS: [f64; 4] = [30.0, 60.0, 90.0, 95.0];
pub const HISTOGRAM_BINS: usize = 100;
/// Relative τ difference above which two sampling strategies are flagged as
/// disagreeing.
pub const SAMPLING_AGREEMENT_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("no scores")]
    EmptyScores,
    #[error("percentile {0} outside (0, 100)")]
    PercentileOutOfRange(f64),
    #[error("invalid score {0}")]
    InvalidScore(f64),
    #[error("no score record for document `{0}`")]
    MissingScore(String),
    #[error("shard {shard} failed: {source}")]
    ShardFailed {
        shard: String,
        #[source]
        source: Box<ThresholdError>,
    },
    #[error("malformed score record at {path}:{line}: {reason}")]
    MalformedScore { path: String, line: usize, reason: String },
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
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ThresholdError + '_ {
    move |source| ThresholdError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub doc_id: String,
    pub score: f64,
    pub shard: String,
}

impl ScoreRecord {
    fn validate(&self) -> Result<(), ThresholdError> {
        if !(self.score.is_finite() && (0.0..=1.0).contains(&self.score)) {
            return Err(ThresholdError::InvalidScore(self.score));
        }
        Ok(())
    }
}

/// Embeds and scores documents, batching by the provider's batch size.
pub fn score_documents(
    provider: &dyn EmbeddingProvider,
    clf: &LinearClassifier,
    docs: &[Document],
) -> Result<Vec<f64>, ThresholdError> {
    check_dims(provider, clf)?;
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(provider.batch_size().max(1)) {
        let texts: Vec<&str> = chunk.iter().map(|d| d.text.as_str()).collect();
        for v in provider.embed_batch(&texts)? {
            out.push(clf.score(&v)?);
        }
    }
    Ok(out)
}

fn check_dims(provider: &dyn EmbeddingProvider, clf: &LinearClassifier) -> Result<(), ThresholdError> {
    if provider.dim() != clf.dim {
        return Err(ClassifierError::DimensionMismatch {
            expected: clf.dim,
            actual: provider.dim(),
        }
        .into());
    }
    Ok(())
}

fn shard_label(path: &Path) -> String {
    path.display().to_string()
}

fn score_shard(
    path: &Path,
    provider: &dyn EmbeddingProvider,
    clf: &LinearClassifier,
) -> Result<Vec<ScoreRecord>, ThresholdError> {
    let label = shard_label(path);
    let mut reader = ShardReader::open(path)?;
    let mut records = Vec::new();
    let mut batch: Vec<Document> = Vec::with_capacity(provider.batch_size());
    let flush = |batch: &mut Vec<Document>, records: &mut Vec<ScoreRecord>| -> Result<(), ThresholdError> {
        if batch.is_empty() {
            return Ok(());
        }
        let scores = score_documents(provider, clf, batch)?;
        records.extend(batch.drain(..).zip(scores).map(|(d, score)| ScoreRecord {
            doc_id: d.id,
            score,
            shard: label.clone(),
        }));
        Ok(())
    };
    for doc in reader.by_ref() {
        batch.push(doc?);
        if batch.len() >= provider.batch_size() {
            flush(&mut batch, &mut records)?;
        }
    }
    flush(&mut batch, &mut records)?;
    if !reader.malformed().is_empty() {
        log::warn!("{label}: skipped {} malformed lines", reader.malformed().len());
    }
    Ok(records)
}

/// Scores every document of the corpus and writes one record per document,
/// in shard order then file order. Shards are scored in parallel; a failing
/// shard aborts the job and is named in the error.
pub fn score_corpus(
    manifest: &CorpusManifest,
    provider: &dyn EmbeddingProvider,
    clf: &LinearClassifier,
    out_path: impl AsRef<Path>,
) -> Result<usize, ThresholdError> {
    check_dims(provider, clf)?;
    let per_shard: Vec<Vec<ScoreRecord>> = manifest
        .shard_paths()
        .par_iter()
        .map(|p| {
            score_shard(p, provider, clf).map_err(|e| ThresholdError::ShardFailed {
                shard: shard_label(p),
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;
    write_scores(out_path, per_shard.iter().flatten())
}

pub fn write_scores<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a ScoreRecord>,
) -> Result<usize, ThresholdError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
    let mut n = 0;
    for r in records {
        r.validate()?;
        serde_json::to_writer(&mut out, r).map_err(|e| io_err(&tmp)(e.into()))?;
        out.write_all(b"\n").map_err(io_err(&tmp))?;
        n += 1;
    }
    out.flush().map_err(io_err(&tmp))?;
    drop(out);
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(n)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>, ThresholdError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| ThresholdError::MalformedScore {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Nearest-rank percentile: the smallest score such that at least
/// `percentile`% of scores are ≤ it.
pub fn estimate_percentile_threshold(scores: &[f64], percentile: f64) -> Result<f64, ThresholdError> {
    if scores.is_empty() {
        return Err(ThresholdError::EmptyScores);
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(ThresholdError::PercentileOutOfRange(percentile));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(ThresholdError::InvalidScore(bad));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(percentile, sorted.len()) - 1])
}

/// 1-based rank `ceil(p/100 · n)`, clamped to `[1, n]`.
fn nearest_rank(percentile: f64, n: usize) -> usize {
    // p·n first keeps integer percentiles exact
    let rank = (percentile * n as f64 / 100.0).ceil() as usize;
    rank.clamp(1, n)
}

/// The selection rule: a document is kept iff its score is strictly above τ.
#[inline]
pub fn passes(score: f64, tau: f64) -> bool {
    score > tau
}

pub fn retention(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| passes(s, tau)).count() as f64 / scores.len() as f64
}

/// Percentile whose threshold keeps roughly `target_retention` of the data.
pub fn percentile_for_retention(target_retention: f64) -> Result<f64, ThresholdError> {
    let p = 100.0 * (1.0 - target_retention);
    if !(p > 0.0 && p < 100.0) {
        return Err(ThresholdError::PercentileOutOfRange(p));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub corpus_name: String,
    pub percentile: f64,
    pub tau: f64,
    pub sample_size: usize,
    pub strategy: String,
}

impl ThresholdEstimate {
    pub fn from_scores(
        corpus_name: &str,
        strategy: &SamplingStrategy,
        scores: &[f64],
        percentile: f64,
    ) -> Result<Self, ThresholdError> {
        Ok(ThresholdEstimate {
            corpus_name: corpus_name.to_string(),
            percentile,
            tau: estimate_percentile_threshold(scores, percentile)?,
            sample_size: scores.len(),
            strategy: strategy.to_string(),
        })
    }
}

/// Score histogram with [`HISTOGRAM_BINS`] equal-width bins over [0, 1].
pub fn score_histogram(scores: impl IntoIterator<Item = f64>) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    for s in scores {
        bins[histogram_bin(s)] += 1;
    }
    bins
}

fn histogram_bin(score: f64) -> usize {
    ((score * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub docs_in: u64,
    pub docs_out: u64,
    pub retention: f64,
    pub score_histogram: Vec<u64>,
    pub tau: f64,
}

impl FilterStats {
    fn from_parts(parts: &[ShardFilterResult], tau: f64) -> Self {
        let docs_in: u64 = parts.iter().map(|p| p.docs_in).sum();
        let docs_out: u64 = parts.iter().map(|p| p.docs_out).sum();
        let mut hist = vec![0u64; HISTOGRAM_BINS];
        for p in parts {
            for (h, c) in hist.iter_mut().zip(&p.histogram) {
                *h += c;
            }
        }
        FilterStats {
            docs_in,
            docs_out,
            retention: if docs_in == 0 { 0.0 } else { docs_out as f64 / docs_in as f64 },
            score_histogram: hist,
            tau,
        }
    }
}

struct ShardFilterResult {
    docs_in: u64,
    docs_out: u64,
    histogram: Vec<u64>,
}

/// Output file names for a manifest's shards. Falls back to index-prefixed
/// names when two shards share a file name.
pub fn output_shard_names(manifest: &CorpusManifest) -> Vec<String> {
    let names: Vec<String> = manifest
        .shard_paths()
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "shard.jsonl".into())
        })
        .collect();
    let unique: HashSet<&String> = names.iter().collect();
    if unique.len() == names.len() {
        names
    } else {
        names.iter().enumerate().map(|(i, n)| format!("{i:05}-{n}")).collect()
    }
}

pub fn load_score_map(scores_path: impl AsRef<Path>) -> Result<HashMap<String, f64>, ThresholdError> {
    Ok(read_scores(scores_path)?
        .into_iter()
        .map(|r| (r.doc_id, r.score))
        .collect())
}

/// Writes, per input shard, the documents whose score is strictly greater
/// than `tau`, preserving order.
pub fn apply_filter(
    manifest: &CorpusManifest,
    scores_path: impl AsRef<Path>,
    tau: f64,
    out_dir: impl AsRef<Path>,
) -> Result<FilterStats, ThresholdError> {
    let scores = load_score_map(scores_path)?;
    apply_filter_with_scores(manifest, &scores, tau, out_dir)
}

pub fn apply_filter_with_scores(
    manifest: &CorpusManifest,
    scores: &HashMap<String, f64>,
    tau: f64,
    out_dir: impl AsRef<Path>,
) -> Result<FilterStats, ThresholdError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let names = output_shard_names(manifest);
    let parts: Vec<ShardFilterResult> = manifest
        .shard_paths()
        .par_iter()
        .zip(names.par_iter())
        .map(|(src, name)| filter_shard(src, &out_dir.join(name), scores, tau))
        .collect::<Result<_, _>>()?;
    Ok(FilterStats::from_parts(&parts, tau))
}

fn filter_shard(
    src: &Path,
    dst: &PathBuf,
    scores: &HashMap<String, f64>,
    tau: f64,
) -> Result<ShardFilterResult, ThresholdError> {
    let contents = corpus::read_shard(src)?;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let mut kept = Vec::new();
    for doc in &contents.docs {
        let &s = scores
            .get(&doc.id)
            .ok_or_else(|| ThresholdError::MissingScore(doc.id.clone()))?;
        histogram[histogram_bin(s)] += 1;
        if passes(s, tau) {
            kept.push(doc);
        }
    }
    let docs_out = corpus::write_shard(dst, kept)? as u64;
    Ok(ShardFilterResult {
        docs_in: contents.docs.len() as u64,
        docs_out,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingComparison {
    pub first: ThresholdEstimate,
    pub random: ThresholdEstimate,
    pub tau_first: f64,
    pub tau_random: f64,
    pub rel_diff: f64,
    /// Set when `rel_diff` reaches [`SAMPLING_AGREEMENT_TOLERANCE`].
    pub flagged: bool,
}

pub fn relative_difference(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Estimates τ from the first shard and from `n_random` seeded random shards
/// and reports how far apart they are.
#[allow(clippy::too_many_arguments)]
pub fn compare_sampling_strategies(
    manifest: &CorpusManifest,
    provider: &dyn EmbeddingProvider,
    clf: &LinearClassifier,
    percentile: f64,
    n_random: usize,
    seed: u64,
    max_docs: usize,
) -> Result<SamplingComparison, ThresholdError> {
    let estimate = |strategy: SamplingStrategy| -> Result<ThresholdEstimate, ThresholdError> {
        let docs = corpus::sample_documents(manifest, strategy, max_docs)?;
        let scores = score_documents(provider, clf, &docs)?;
        ThresholdEstimate::from_scores(&manifest.corpus_name, &strategy, &scores, percentile)
    };
    let first = estimate(SamplingStrategy::FirstFile)?;
    let random = estimate(SamplingStrategy::RandomFiles { n: n_random, seed })?;
    Ok(compare_estimates(first, random))
}

pub fn compare_estimates(first: ThresholdEstimate, random: ThresholdEstimate) -> SamplingComparison {
    let rel_diff = relative_difference(first.tau, random.tau);
    SamplingComparison {
        tau_first: first.tau,
        tau_random: random.tau,
        rel_diff,
        flagged: rel_diff >= SAMPLING_AGREEMENT_TOLERANCE,
        first,
        random,
    }
}

/// On-disk score cache keyed by corpus, provider fingerprint and classifier
/// hash, so re-filtering at a new percentile reuses scores.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    dir: PathBuf,
}

impl ScoreCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ScoreCache { dir: dir.into() }
    }

    pub fn key(manifest: &CorpusManifest, provider_fingerprint: &str, clf: &LinearClassifier) -> String {
        let mut material = String::new();
        material.push_str(&manifest.corpus_name);
        for p in manifest.shard_paths() {
            material.push('\0');
            material.push_str(&p.to_string_lossy());
        }
        material.push('\0');
        material.push_str(provider_fingerprint);
        material.push('\0');
        material.push_str(&sha256_hex(clf.to_json().as_bytes()));
        sha256_hex(material.as_bytes())
    }

    pub fn path_for(&self, manifest: &CorpusManifest, provider_fingerprint: &str, clf: &LinearClassifier) -> PathBuf {
        let key = Self::key(manifest, provider_fingerprint, clf);
        let safe: String = manifest
            .corpus_name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.dir.join(format!("{safe}-{}.scores.jsonl", &key[..16]))
    }

    /// Returns the cached score file, scoring the corpus first on a miss.
    pub fn get_or_score(
        &self,
        manifest: &CorpusManifest,
        provider: &dyn EmbeddingProvider,
        provider_fingerprint: &str,
        clf: &LinearClassifier,
    ) -> Result<(PathBuf, bool), ThresholdError> {
        let path = self.path_for(manifest, provider_fingerprint, clf);
        if path.is_file() {
            return Ok((path, true));
        }
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        score_corpus(manifest, provider, clf, &path)?;
        Ok((path, false))
    }
}
