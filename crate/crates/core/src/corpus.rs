//! Newline-delimited document shards, corpus manifests and deterministic
//! document sampling.
//!
//! A shard holds one JSON record per line with the fields `id`, `text`,
//! `lang`, `source` and an optional `meta` object. Files ending in `.gz` are
//! transparently (de)compressed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of documents drawn when estimating a threshold.
pub const DEFAULT_SAMPLE_DOCS: usize = 100_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid sampling request: {0}")]
    InvalidSample(String),
    #[error("corpus `{0}` yielded no documents")]
    EmptyCorpus(String),
    #[error("invalid document: {0}")]
    InvalidDocument(String),
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CorpusError::FileNotFound(path.to_path_buf())
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// One text record of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub lang: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        lang: impl Into<String>,
        source: impl Into<String>,
    ) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            lang: lang.into(),
            source: source.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::InvalidDocument("empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(CorpusError::InvalidDocument(format!(
                "document `{}` has empty text",
                self.id
            )));
        }
        if self.lang.is_empty() {
            return Err(CorpusError::InvalidDocument(format!(
                "document `{}` has empty lang",
                self.id
            )));
        }
        Ok(())
    }
}

/// A line that could not be decoded into a valid [`Document`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedRecord {
    /// 1-based line number within the shard.
    pub line_no: usize,
    pub reason: String,
}

impl fmt::Display for MalformedRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line_no, self.reason)
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead + Send>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let reader: Box<dyn Read + Send> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::with_capacity(1 << 16, reader)))
}

/// Streaming reader over a shard.
///
/// Yields valid documents in file order. Malformed lines are skipped and
/// recorded; inspect them with [`ShardReader::malformed`] once the iterator
/// is exhausted. I/O failures are yielded as errors and end the stream.
pub struct ShardReader {
    path: PathBuf,
    inner: Box<dyn BufRead + Send>,
    line_no: usize,
    buf: Vec<u8>,
    malformed: Vec<MalformedRecord>,
    done: bool,
}

impl ShardReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref().to_path_buf();
        let inner = open_input(&path)?;
        Ok(ShardReader {
            path,
            inner,
            line_no: 0,
            buf: Vec::new(),
            malformed: Vec::new(),
            done: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn malformed(&self) -> &[MalformedRecord] {
        &self.malformed
    }

    pub fn into_malformed(self) -> Vec<MalformedRecord> {
        self.malformed
    }

    fn parse_line(&self, raw: &[u8]) -> Result<Document, String> {
        let line = std::str::from_utf8(raw).map_err(|e| format!("invalid UTF-8: {e}"))?;
        let doc: Document =
            serde_json::from_str(line).map_err(|e| format!("invalid record: {e}"))?;
        doc.validate().map_err(|e| e.to_string())?;
        Ok(doc)
    }
}

impl Iterator for ShardReader {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            match self.inner.read_until(b'\n', &mut self.buf) {
                Ok(0) => self.done = true,
                Ok(_) => {
                    self.line_no += 1;
                    let mut raw = self.buf.as_slice();
                    if raw.last() == Some(&b'\n') {
                        raw = &raw[..raw.len() - 1];
                    }
                    if raw.last() == Some(&b'\r') {
                        raw = &raw[..raw.len() - 1];
                    }
                    if raw.iter().all(u8::is_ascii_whitespace) {
                        continue;
                    }
                    match self.parse_line(raw) {
                        Ok(doc) => return Some(Ok(doc)),
                        Err(reason) => {
                            log::warn!("{}: line {}: {}", self.path.display(), self.line_no, reason);
                            self.malformed.push(MalformedRecord {
                                line_no: self.line_no,
                                reason,
                            });
                        }
                    }
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(CorpusError::io(&self.path, e)));
                }
            }
        }
        None
    }
}

/// Fully materialized result of reading a shard.
#[derive(Debug, Clone, Default)]
pub struct ShardContents {
    pub docs: Vec<Document>,
    pub malformed: Vec<MalformedRecord>,
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<ShardContents, CorpusError> {
    let mut reader = ShardReader::open(path)?;
    let docs = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(ShardContents {
        docs,
        malformed: reader.into_malformed(),
    })
}

/// Writes one record per line and returns the number of documents written.
pub fn write_shard<'a, I>(path: impl AsRef<Path>, docs: I) -> Result<usize, CorpusError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    if is_gzip(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        let n = write_records(&mut enc, docs).map_err(|e| CorpusError::io(path, e))?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| CorpusError::io(path, e))?;
        Ok(n)
    } else {
        let mut out = BufWriter::new(file);
        let n = write_records(&mut out, docs).map_err(|e| CorpusError::io(path, e))?;
        out.flush().map_err(|e| CorpusError::io(path, e))?;
        Ok(n)
    }
}

fn write_records<'a, W: Write>(
    out: &mut W,
    docs: impl IntoIterator<Item = &'a Document>,
) -> io::Result<usize> {
    let mut n = 0;
    for doc in docs {
        serde_json::to_writer(&mut *out, doc)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

/// The on-disk manifest record.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    corpus_name: String,
    lang: String,
    shards: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doc_count_estimate: Option<u64>,
}

/// A named corpus split into shards. Shard paths are kept in lexicographic
/// order so that "the first file" is well defined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub corpus_name: String,
    pub lang: String,
    shard_paths: Vec<PathBuf>,
    pub doc_count_estimate: Option<u64>,
}

impl CorpusManifest {
    pub fn new(
        corpus_name: impl Into<String>,
        lang: impl Into<String>,
        shard_paths: Vec<PathBuf>,
    ) -> Result<Self, CorpusError> {
        let corpus_name = corpus_name.into();
        if shard_paths.is_empty() {
            return Err(CorpusError::InvalidManifest(format!(
                "corpus `{corpus_name}` lists no shards"
            )));
        }
        let mut shard_paths = shard_paths;
        shard_paths.sort();
        shard_paths.dedup();
        Ok(CorpusManifest {
            corpus_name,
            lang: lang.into(),
            shard_paths,
            doc_count_estimate: None,
        })
    }

    /// Loads a manifest. Relative shard paths resolve against the manifest's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CorpusError::io(path, e))?;
        let raw: ManifestFile = serde_json::from_slice(&bytes)
            .map_err(|e| CorpusError::InvalidManifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let shards = raw
            .shards
            .iter()
            .map(|s| {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            })
            .collect();
        let mut manifest = CorpusManifest::new(raw.corpus_name, raw.lang, shards)?;
        manifest.doc_count_estimate = raw.doc_count_estimate;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let raw = ManifestFile {
            corpus_name: self.corpus_name.clone(),
            lang: self.lang.clone(),
            shards: self
                .shard_paths
                .iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect(),
            doc_count_estimate: self.doc_count_estimate,
        };
        let mut bytes = serde_json::to_vec_pretty(&raw).expect("manifest serializes");
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| CorpusError::io(path, e))
    }

    pub fn shard_paths(&self) -> &[PathBuf] {
        &self.shard_paths
    }
}

/// How to draw a threshold-estimation sample from a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingStrategy {
    FirstFile,
    RandomFiles { n: usize, seed: u64 },
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::FirstFile => write!(f, "first_file"),
            SamplingStrategy::RandomFiles { n, seed } => write!(f, "random_files({n},{seed})"),
        }
    }
}

impl SamplingStrategy {
    /// Indices into the manifest's shard list that this strategy reads, in
    /// read order.
    pub fn select_shards(&self, manifest: &CorpusManifest) -> Result<Vec<usize>, CorpusError> {
        let total = manifest.shard_paths.len();
        match *self {
            SamplingStrategy::FirstFile => Ok(vec![0]),
            SamplingStrategy::RandomFiles { n, seed } => {
                if n == 0 || n > total {
                    return Err(CorpusError::InvalidSample(format!(
                        "cannot pick {n} of {total} shards"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(rand::seq::index::sample(&mut rng, total, n).into_vec())
            }
        }
    }
}

/// Draws up to `max_docs` documents. `FirstFile` reads the head of the first
/// shard; `RandomFiles` picks shards without replacement and reads them
/// round-robin, one document per shard per turn.
pub fn sample_documents(
    manifest: &CorpusManifest,
    strategy: SamplingStrategy,
    max_docs: usize,
) -> Result<Vec<Document>, CorpusError> {
    if max_docs == 0 {
        return Err(CorpusError::InvalidSample("max_docs must be positive".into()));
    }
    let chosen = strategy.select_shards(manifest)?;
    let mut readers = chosen
        .iter()
        .map(|&i| ShardReader::open(&manifest.shard_paths[i]))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Vec::with_capacity(max_docs.min(1 << 20));
    let mut live = vec![true; readers.len()];
    while out.len() < max_docs && live.iter().any(|&l| l) {
        for (reader, alive) in readers.iter_mut().zip(live.iter_mut()) {
            if !*alive {
                continue;
            }
            match reader.next() {
                Some(doc) => out.push(doc?),
                None => *alive = false,
            }
            if out.len() == max_docs {
                break;
            }
        }
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus(manifest.corpus_name.clone()));
    }
    Ok(out)
}
