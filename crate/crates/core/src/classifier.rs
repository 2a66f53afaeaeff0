//! Binary quality classifier: L2-regularized logistic regression over
//! document embeddings.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{l2_normalize, EmbeddingVector};
use crate::provenance::TOOLKIT_VERSION;

/// Examples per leaf of the gradient reduction tree. Fixed so that the
/// summation order does not depend on the worker count.
const REDUCE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("dimension mismatch: classifier has {expected}, input has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no training or evaluation data")]
    EmptyData,
    #[error("data contains a single class (label {0})")]
    SingleClassData(u8),
    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(u8),
    #[error("annotation score {0} outside 0..=5")]
    ScoreOutOfRange(i64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid classifier: {0}")]
    InvalidClassifier(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed classifier file: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: EmbeddingVector,
    pub y: u8,
    pub origin: String,
}

impl LabeledExample {
    pub fn new(x: EmbeddingVector, y: u8, origin: impl Into<String>) -> Result<Self, ClassifierError> {
        if y > 1 {
            return Err(ClassifierError::InvalidLabel(y));
        }
        Ok(LabeledExample {
            x,
            y,
            origin: origin.into(),
        })
    }
}

/// Weights and bias of the quality classifier plus provenance. This is also
/// the on-disk record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub version: String,
    pub dim: usize,
    pub normalize_inputs: bool,
    pub w: Vec<f64>,
    pub b: f64,
    pub trained_on: String,
    pub seed: u64,
    pub l2_lambda: f64,
    pub train_loss: f64,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, normalize_inputs: bool) -> Self {
        LinearClassifier {
            version: TOOLKIT_VERSION.to_string(),
            dim,
            normalize_inputs,
            w: vec![0.0; dim],
            b: 0.0,
            trained_on: String::new(),
            seed: 0,
            l2_lambda: 0.0,
            train_loss: f64::NAN,
        }
    }

    pub fn from_weights(w: Vec<f64>, b: f64, normalize_inputs: bool) -> Self {
        LinearClassifier {
            dim: w.len(),
            w,
            b,
            ..Self::zeros(0, normalize_inputs)
        }
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.dim == 0 {
            return Err(ClassifierError::InvalidClassifier("dim is zero".into()));
        }
        if self.w.len() != self.dim {
            return Err(ClassifierError::InvalidClassifier(format!(
                "dim {} but {} weights",
                self.dim,
                self.w.len()
            )));
        }
        if !self.b.is_finite() || self.w.iter().any(|v| !v.is_finite()) {
            return Err(ClassifierError::InvalidClassifier("non-finite parameter".into()));
        }
        Ok(())
    }

    fn check_dim(&self, actual: usize) -> Result<(), ClassifierError> {
        if actual != self.dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim,
                actual,
            });
        }
        Ok(())
    }

    /// Applies the input transform recorded on the classifier. A zero vector
    /// passes through unchanged.
    fn prepare<'a>(&self, x: &'a EmbeddingVector) -> std::borrow::Cow<'a, [f64]> {
        if self.normalize_inputs && !x.is_normalized() {
            if let Ok(n) = l2_normalize(x) {
                return std::borrow::Cow::Owned(n.into_values());
            }
        }
        std::borrow::Cow::Borrowed(x.values())
    }

    pub fn logit(&self, x: &EmbeddingVector) -> Result<f64, ClassifierError> {
        self.check_dim(x.dim())?;
        Ok(dot(&self.w, &self.prepare(x)) + self.b)
    }

    pub fn score(&self, x: &EmbeddingVector) -> Result<f64, ClassifierError> {
        Ok(sigmoid(self.logit(x)?))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("classifier serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, ClassifierError> {
        let clf: LinearClassifier = serde_json::from_str(s)?;
        clf.validate()?;
        Ok(clf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        let path = path.as_ref();
        self.validate()?;
        std::fs::write(path, self.to_json()).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }
}

pub fn score(clf: &LinearClassifier, x: &EmbeddingVector) -> Result<f64, ClassifierError> {
    clf.score(x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Prepared design matrix: one row per example after the input transform.
struct Objective {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<f64>,
    l2_lambda: f64,
}

#[derive(Clone)]
struct Partial {
    loss: f64,
    grad_w: Vec<f64>,
    grad_b: f64,
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        self.loss += other.loss;
        self.grad_b += other.grad_b;
        for (a, b) in self.grad_w.iter_mut().zip(&other.grad_w) {
            *a += b;
        }
        self
    }
}

/// Pairwise reduction over a fixed leaf order.
fn tree_reduce(mut parts: Vec<Partial>) -> Partial {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one partial")
}

impl Objective {
    fn new(
        template: &LinearClassifier,
        data: &[LabeledExample],
        l2_lambda: f64,
    ) -> Result<Self, ClassifierError> {
        if data.is_empty() {
            return Err(ClassifierError::EmptyData);
        }
        let dim = template.dim;
        let mut rows = Vec::with_capacity(dim * data.len());
        let mut labels = Vec::with_capacity(data.len());
        for ex in data {
            template.check_dim(ex.x.dim())?;
            if ex.y > 1 {
                return Err(ClassifierError::InvalidLabel(ex.y));
            }
            rows.extend_from_slice(&template.prepare(&ex.x));
            labels.push(f64::from(ex.y));
        }
        Ok(Objective {
            dim,
            rows,
            labels,
            l2_lambda,
        })
    }

    fn n(&self) -> usize {
        self.labels.len()
    }

    fn partial(&self, w: &[f64], b: f64, idx: &[usize], with_grad: bool) -> Partial {
        let mut p = Partial {
            loss: 0.0,
            grad_w: if with_grad { vec![0.0; self.dim] } else { Vec::new() },
            grad_b: 0.0,
        };
        for &i in idx {
            let x = &self.rows[i * self.dim..(i + 1) * self.dim];
            let y = self.labels[i];
            let z = dot(w, x) + b;
            p.loss += softplus(z) - y * z;
            if with_grad {
                let r = sigmoid(z) - y;
                p.grad_b += r;
                for (g, xv) in p.grad_w.iter_mut().zip(x) {
                    *g += r * xv;
                }
            }
        }
        p
    }

    /// Mean loss (and gradient) over `idx`, plus the L2 penalty on `w`.
    fn eval_subset(&self, w: &[f64], b: f64, idx: &[usize], with_grad: bool) -> (f64, Vec<f64>, f64) {
        let parts: Vec<Partial> = idx
            .par_chunks(REDUCE_CHUNK)
            .map(|chunk| self.partial(w, b, chunk, with_grad))
            .collect();
        let total = tree_reduce(parts);
        let n = idx.len() as f64;
        let penalty = 0.5 * self.l2_lambda * dot(w, w);
        let loss = total.loss / n + penalty;
        let grad_w = total
            .grad_w
            .iter()
            .zip(w)
            .map(|(g, wv)| g / n + self.l2_lambda * wv)
            .collect();
        (loss, grad_w, total.grad_b / n)
    }

    fn eval(&self, w: &[f64], b: f64, all: &[usize]) -> (f64, Vec<f64>, f64) {
        self.eval_subset(w, b, all, true)
    }
}

/// Mean binary cross-entropy of `clf` on `data` plus `(l2_lambda / 2)·‖w‖²`,
/// with its exact gradient. The bias is not penalized.
pub fn loss_and_gradient(
    clf: &LinearClassifier,
    data: &[LabeledExample],
    l2_lambda: f64,
) -> Result<(f64, Vec<f64>, f64), ClassifierError> {
    let obj = Objective::new(clf, data, l2_lambda)?;
    let all: Vec<usize> = (0..obj.n()).collect();
    Ok(obj.eval(&clf.w, clf.b, &all))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BatchMode {
    /// Full-batch gradient descent with backtracking line search.
    Full,
    /// Shuffled minibatch SGD with a constant step.
    Minibatch { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub max_epochs: usize,
    /// Initial step for the line search, or the constant SGD step.
    pub learning_rate: f64,
    /// Stop once the full-data gradient norm falls below this.
    pub tolerance: f64,
    pub batch_mode: BatchMode,
    pub seed: u64,
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_lambda: 1e-4,
            max_epochs: 2000,
            learning_rate: 1.0,
            tolerance: 1e-6,
            batch_mode: BatchMode::Full,
            seed: 0,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.to_string()));
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be >= 0");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be > 0");
        }
        if let BatchMode::Minibatch { size: 0 } = self.batch_mode {
            return bad("minibatch size must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub classifier: LinearClassifier,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

pub fn train_logistic(
    data: &[LabeledExample],
    config: &TrainConfig,
) -> Result<LinearClassifier, ClassifierError> {
    train_logistic_report(data, config).map(|r| r.classifier)
}

fn norm2(w: &[f64], b: f64) -> f64 {
    dot(w, w) + b * b
}

pub fn train_logistic_report(
    data: &[LabeledExample],
    config: &TrainConfig,
) -> Result<TrainReport, ClassifierError> {
    config.validate()?;
    let first = data.first().ok_or(ClassifierError::EmptyData)?;
    if let Some(y) = [0u8, 1].into_iter().find(|&c| data.iter().all(|e| e.y == c)) {
        return Err(ClassifierError::SingleClassData(y));
    }
    let dim = first.x.dim();
    let mut clf = LinearClassifier::zeros(dim, config.normalize_inputs);
    clf.seed = config.seed;
    clf.l2_lambda = config.l2_lambda;
    let obj = Objective::new(&clf, data, config.l2_lambda)?;
    let all: Vec<usize> = (0..obj.n()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = 0.0;

    let (initial_loss, mut grad_w, mut grad_b) = obj.eval(&w, b, &all);
    let mut loss = initial_loss;
    let mut gnorm = norm2(&grad_w, grad_b).sqrt();
    let mut epochs = 0;
    let mut converged = gnorm < config.tolerance;

    match config.batch_mode {
        BatchMode::Full => {
            let mut step = config.learning_rate;
            while !converged && epochs < config.max_epochs {
                epochs += 1;
                let g2 = gnorm * gnorm;
                let mut accepted = false;
                while step > 1e-16 {
                    let cand_w: Vec<f64> = w.iter().zip(&grad_w).map(|(a, g)| a - step * g).collect();
                    let cand_b = b - step * grad_b;
                    let (cand_loss, cgw, cgb) = obj.eval(&cand_w, cand_b, &all);
                    // Armijo sufficient decrease
                    if cand_loss <= loss - 0.5 * step * g2 {
                        w = cand_w;
                        b = cand_b;
                        loss = cand_loss;
                        grad_w = cgw;
                        grad_b = cgb;
                        accepted = true;
                        step *= 2.0;
                        break;
                    }
                    step *= 0.5;
                }
                gnorm = norm2(&grad_w, grad_b).sqrt();
                converged = gnorm < config.tolerance;
                if !accepted {
                    log::debug!("line search stalled at epoch {epochs}, loss {loss}");
                    break;
                }
            }
        }
        BatchMode::Minibatch { size } => {
            let mut best = (loss, w.clone(), b);
            let mut order = all.clone();
            while !converged && epochs < config.max_epochs {
                epochs += 1;
                order.shuffle(&mut rng);
                for batch in order.chunks(size) {
                    let (_, gw, gb) = obj.eval_subset(&w, b, batch, true);
                    for (wv, g) in w.iter_mut().zip(&gw) {
                        *wv -= config.learning_rate * g;
                    }
                    b -= config.learning_rate * gb;
                }
                let (l, gw, gb) = obj.eval(&w, b, &all);
                gnorm = norm2(&gw, gb).sqrt();
                converged = gnorm < config.tolerance;
                if l < best.0 {
                    best = (l, w.clone(), b);
                }
            }
            // return the best iterate seen, so the final loss never exceeds the initial
            loss = best.0;
            w = best.1;
            b = best.2;
        }
    }

    clf.w = w;
    clf.b = b;
    clf.train_loss = loss;
    clf.trained_on = summarize_origins(data);
    clf.validate()?;
    Ok(TrainReport {
        classifier: clf,
        initial_loss,
        final_loss: loss,
        epochs,
        grad_norm: gnorm,
        converged,
    })
}

/// "origin:count" pairs in first-seen order, e.g. `oh_eli5:500,refinedweb:500`.
fn summarize_origins(data: &[LabeledExample]) -> String {
    let mut seen: Vec<(&str, usize)> = Vec::new();
    for ex in data {
        match seen.iter_mut().find(|(o, _)| *o == ex.origin) {
            Some((_, c)) => *c += 1,
            None => seen.push((&ex.origin, 1)),
        }
    }
    seen.iter()
        .map(|(o, c)| format!("{o}:{c}"))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Absent when only one class is present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub n: usize,
}

/// Accuracy at the 0.5 decision threshold (score ≥ 0.5 predicts 1) and
/// rank-statistic AUC.
pub fn evaluate(clf: &LinearClassifier, data: &[LabeledExample]) -> Result<Evaluation, ClassifierError> {
    if data.is_empty() {
        return Err(ClassifierError::EmptyData);
    }
    let scores = data
        .par_iter()
        .map(|ex| clf.score(&ex.x))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<u8> = data.iter().map(|e| e.y).collect();
    evaluate_scores(&scores, &labels)
}

pub fn evaluate_scores(scores: &[f64], labels: &[u8]) -> Result<Evaluation, ClassifierError> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(ClassifierError::EmptyData);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| u8::from(s >= 0.5) == y)
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / scores.len() as f64,
        auc: auc(scores, labels).ok(),
        n: scores.len(),
    })
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, ClassifierError> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(ClassifierError::SingleClassData(0));
    }
    if n_neg == 0 {
        return Err(ClassifierError::SingleClassData(1));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// A FineWeb-Edu style annotation: educational value on a 0–5 scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedText {
    pub text: String,
    pub score: i64,
}

/// Cutoff for turning 0–5 annotations into binary quality labels.
pub const FWE_POSITIVE_CUTOFF: i64 = 2;

pub fn binarize_fwe_annotations(records: &[AnnotatedText]) -> Result<Vec<(String, u8)>, ClassifierError> {
    records
        .iter()
        .map(|r| {
            if !(0..=5).contains(&r.score) {
                return Err(ClassifierError::ScoreOutOfRange(r.score));
            }
            Ok((r.text.clone(), u8::from(r.score >= FWE_POSITIVE_CUTOFF)))
        })
        .collect()
}
