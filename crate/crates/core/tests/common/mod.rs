#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use qfilter_core::corpus::{write_shard, CorpusManifest, Document};
use qfilter_core::embedding::hashed_ngram_embed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// How the mock embedding server answers.
#[derive(Debug, Clone, Copy)]
pub enum MockMode {
    /// Hashed n-gram vectors of the configured dimension.
    Good { dim: usize },
    /// Well-formed response whose `dim` and vectors have the wrong size.
    WrongDim { dim: usize },
    /// HTTP 503 for the first `failures` requests, then `Good`.
    FailFirst { failures: usize, dim: usize },
}

/// Minimal HTTP/1.1 server speaking the `/embed` protocol.
pub struct MockEmbedServer {
    pub endpoint: String,
    requests: Arc<AtomicUsize>,
    batch_sizes: Arc<Mutex<Vec<usize>>>,
    auth_headers: Arc<Mutex<Vec<Option<String>>>>,
}

impl MockEmbedServer {
    pub fn start(mode: MockMode) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let endpoint = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let batch_sizes = Arc::new(Mutex::new(Vec::new()));
        let auth_headers = Arc::new(Mutex::new(Vec::new()));
        let (r, b, a) = (requests.clone(), batch_sizes.clone(), auth_headers.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (r, b, a) = (r.clone(), b.clone(), a.clone());
                thread::spawn(move || serve_connection(stream, mode, &r, &b, &a));
            }
        });
        MockEmbedServer {
            endpoint,
            requests,
            batch_sizes,
            auth_headers,
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        let mut v = self.batch_sizes.lock().unwrap().clone();
        v.sort_unstable();
        v
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.auth_headers.lock().unwrap().clone()
    }
}

fn serve_connection(
    stream: TcpStream,
    mode: MockMode,
    requests: &AtomicUsize,
    batch_sizes: &Mutex<Vec<usize>>,
    auth_headers: &Mutex<Vec<Option<String>>>,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut content_length = 0usize;
    let mut auth = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = v.trim().parse().unwrap_or(0),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let n = requests.fetch_add(1, Ordering::SeqCst);
    auth_headers.lock().unwrap().push(auth);

    let (status, payload) = if !request_line.starts_with("POST /embed ") {
        (404, json!({"error": "not found"}))
    } else {
        let parsed: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let texts: Vec<String> = parsed["texts"]
            .as_array()
            .map(|a| a.iter().filter_map(|t| t.as_str().map(String::from)).collect())
            .unwrap_or_default();
        batch_sizes.lock().unwrap().push(texts.len());
        match mode {
            MockMode::Good { dim } => (200, embed_response(&texts, dim)),
            MockMode::WrongDim { dim } => (200, embed_response(&texts, dim)),
            MockMode::FailFirst { failures, .. } if n < failures => {
                (503, json!({"error": "warming up"}))
            }
            MockMode::FailFirst { dim, .. } => (200, embed_response(&texts, dim)),
        }
    };
    let body = serde_json::to_vec(&payload).unwrap();
    let reason = match status {
        200 => "OK",
        404 => "Not Found",
        _ => "Service Unavailable",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = writer.write_all(head.as_bytes());
    let _ = writer.write_all(&body);
    let _ = writer.flush();
}

/// The mock's vectors are the hashed n-gram embedding with range (1, 3) and
/// seed 0, so remote and local scores can be compared.
pub fn embed_response(texts: &[String], dim: usize) -> Value {
    let vectors: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| hashed_ngram_embed(t, dim, (1, 3), 0).unwrap().into_values())
        .collect();
    json!({ "vectors": vectors, "dim": dim })
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "be", "da", "fu", "go", "hi", "ju", "pe", "qua", "sa", "te",
    "ul", "ve", "wo", "xi", "ye", "zu",
];

pub fn random_word(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=4);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

pub fn random_text(rng: &mut impl Rng, min_words: usize, max_words: usize) -> String {
    let n = rng.random_range(min_words..=max_words);
    (0..n).map(|_| random_word(rng)).collect::<Vec<_>>().join(" ")
}

pub fn random_documents(rng: &mut impl Rng, n: usize, prefix: &str, lang: &str) -> Vec<Document> {
    (0..n)
        .map(|i| Document::new(format!("{prefix}-{i:06}"), random_text(rng, 8, 40), lang, prefix))
        .collect()
}

/// Writes `docs` into `n_shards` contiguous shard files, shuffled first when
/// a seed is given, and returns the saved manifest.
pub fn write_corpus(
    dir: &Path,
    name: &str,
    docs: &[Document],
    n_shards: usize,
    shuffle_seed: Option<u64>,
) -> CorpusManifest {
    std::fs::create_dir_all(dir).unwrap();
    let mut order: Vec<&Document> = docs.iter().collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let per = order.len().div_ceil(n_shards);
    let mut paths: Vec<PathBuf> = Vec::new();
    for (i, chunk) in order.chunks(per).enumerate() {
        let p = dir.join(format!("{name}-{i:04}.jsonl"));
        write_shard(&p, chunk.iter().copied()).unwrap();
        paths.push(p);
    }
    let manifest = CorpusManifest::new(name, "xx", paths).unwrap();
    manifest.save(dir.join(format!("{name}.manifest.json"))).unwrap();
    manifest
}

/// Labeled seed documents whose classes differ in vocabulary: positives
/// draw from the first half of the syllable table, negatives from the second.
pub fn seed_texts(rng: &mut impl Rng, n_per_class: usize) -> Vec<(String, u8)> {
    let half = SYLLABLES.len() / 2;
    let mut out = Vec::new();
    for label in [1u8, 0u8] {
        let range = if label == 1 { 0..half } else { half..SYLLABLES.len() };
        for _ in 0..n_per_class {
            let n = rng.random_range(10..30);
            let text: Vec<String> = (0..n)
                .map(|_| {
                    let k = rng.random_range(1..=3);
                    (0..k).map(|_| SYLLABLES[rng.random_range(range.clone())]).collect()
                })
                .collect();
            out.push((text.join(" "), label));
        }
    }
    out
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}
