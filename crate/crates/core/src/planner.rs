//! Token-budget arithmetic for training mixtures: steps to tokens, Chinchilla
//! multiples and per-dataset epoch counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Compute-optimal tokens per parameter.
pub const CHINCHILLA_TOKENS_PER_PARAM: f64 = 20.0;
/// Epochs above which a dataset is flagged as over-repeated.
pub const EPOCH_WARN_LIMIT: f64 = 10.0;
/// Epochs above which repetition is worth a note.
pub const EPOCH_ADVISORY_LIMIT: f64 = 4.0;

const WEIGHT_TOLERANCE: f64 = 1e-9;
const BILLION: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("arithmetic overflow computing {0}")]
    Overflow(&'static str),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("no budget entry for language `{0}`")]
    MissingLanguageBudget(String),
    #[error("datasets for language `{0}` have zero available tokens")]
    ZeroAvailability(String),
}

pub fn tokens_for_steps(steps: u64, batch_size: u64, context_len: u64) -> Result<u128, PlanError> {
    if steps == 0 || batch_size == 0 || context_len == 0 {
        return Err(PlanError::InvalidPlan("steps, batch_size and context_len must be positive".into()));
    }
    u128::from(steps)
        .checked_mul(u128::from(batch_size))
        .and_then(|t| t.checked_mul(u128::from(context_len)))
        .ok_or(PlanError::Overflow("tokens_for_steps"))
}

/// Training tokens as a multiple of the compute-optimal budget.
pub fn chinchilla_multiple(tokens: f64, model_params: f64) -> f64 {
    tokens / (CHINCHILLA_TOKENS_PER_PARAM * model_params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamsBasis {
    #[default]
    NonEmbedding,
    Total,
}

/// Reference model sizes (non-embedding parameters).
pub const MODEL_PRESETS: [(&str, f64); 3] = [("350M", 350e6), ("1.3B", 1.3e9), ("2.7B", 2.7e9)];

pub fn model_preset(name: &str) -> Option<f64> {
    MODEL_PRESETS.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageWeight {
    pub lang: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub steps: u64,
    pub batch_size: u64,
    pub context_len: u64,
    pub languages: Vec<LanguageWeight>,
    pub model_params: f64,
    #[serde(default)]
    pub params_basis: ParamsBasis,
}

impl TrainingPlan {
    /// Equal weights over `langs`.
    pub fn equal_mix(steps: u64, batch_size: u64, context_len: u64, langs: &[&str], model_params: f64) -> Self {
        let w = 1.0 / langs.len() as f64;
        TrainingPlan {
            steps,
            batch_size,
            context_len,
            languages: langs
                .iter()
                .map(|l| LanguageWeight {
                    lang: l.to_string(),
                    weight: w,
                })
                .collect(),
            model_params,
            params_basis: ParamsBasis::NonEmbedding,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.languages.is_empty() {
            return Err(PlanError::InvalidPlan("no languages".into()));
        }
        if self.languages.iter().any(|l| !(l.weight > 0.0 && l.weight.is_finite())) {
            return Err(PlanError::InvalidPlan("language weights must be positive".into()));
        }
        let sum: f64 = self.languages.iter().map(|l| l.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(PlanError::InvalidPlan(format!("weights sum to {sum}, not 1")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.languages.iter().find(|l| !seen.insert(&l.lang)) {
            return Err(PlanError::InvalidPlan(format!("language `{}` listed twice", dup.lang)));
        }
        if !(self.model_params > 0.0) {
            return Err(PlanError::InvalidPlan("model_params must be positive".into()));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> Result<u128, PlanError> {
        tokens_for_steps(self.steps, self.batch_size, self.context_len)
    }

    pub fn chinchilla_multiple(&self) -> Result<f64, PlanError> {
        Ok(chinchilla_multiple(self.total_tokens()? as f64, self.model_params))
    }

    /// Integer token allotment per language. Largest-remainder rounding keeps
    /// the sum equal to the plan total.
    pub fn language_tokens(&self) -> Result<Vec<(String, u128)>, PlanError> {
        self.validate()?;
        let total = self.total_tokens()?;
        let wsum: f64 = self.languages.iter().map(|l| l.weight).sum();
        let exact: Vec<f64> = self
            .languages
            .iter()
            .map(|l| total as f64 * l.weight / wsum)
            .collect();
        let mut alloc: Vec<u128> = exact.iter().map(|e| e.floor() as u128).collect();
        let assigned: u128 = alloc.iter().sum();
        let mut leftover = total.saturating_sub(assigned);
        let mut order: Vec<usize> = (0..alloc.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            alloc[i] += 1;
            leftover -= 1;
        }
        // f64 rounding can overshoot slightly for very large totals
        let mut excess = alloc.iter().sum::<u128>().saturating_sub(total);
        for a in alloc.iter_mut().rev() {
            let take = excess.min(*a);
            *a -= take;
            excess -= take;
        }
        Ok(self.languages.iter().map(|l| l.lang.clone()).zip(alloc).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub dataset: String,
    pub lang: String,
    /// Billions of tokens.
    pub available_tokens: f64,
}

impl BudgetEntry {
    pub fn new(dataset: impl Into<String>, lang: impl Into<String>, available_tokens: f64) -> Self {
        BudgetEntry {
            dataset: dataset.into(),
            lang: lang.into(),
            available_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBudget {
    pub dataset: String,
    pub lang: String,
    /// Billions of tokens.
    pub available_tokens: f64,
    /// Billions of tokens.
    pub required_tokens: f64,
    pub epochs: f64,
    /// More than [`EPOCH_WARN_LIMIT`] epochs.
    pub warn: bool,
    /// More than [`EPOCH_ADVISORY_LIMIT`] epochs.
    pub advisory: bool,
}

/// Splits each language's token requirement across that language's datasets
/// in proportion to availability and derives epoch counts. Budget entries
/// for languages outside the plan get zero requirement.
pub fn plan_mix(plan: &TrainingPlan, budgets: &[BudgetEntry]) -> Result<Vec<DatasetBudget>, PlanError> {
    let per_lang: BTreeMap<String, u128> = plan.language_tokens()?.into_iter().collect();
    if let Some(b) = budgets.iter().find(|b| !(b.available_tokens >= 0.0 && b.available_tokens.is_finite())) {
        return Err(PlanError::InvalidPlan(format!(
            "dataset `{}` has invalid availability {}",
            b.dataset, b.available_tokens
        )));
    }
    let mut lang_avail: BTreeMap<&str, f64> = BTreeMap::new();
    for b in budgets {
        *lang_avail.entry(b.lang.as_str()).or_default() += b.available_tokens;
    }
    for l in &plan.languages {
        match lang_avail.get(l.lang.as_str()) {
            None => return Err(PlanError::MissingLanguageBudget(l.lang.clone())),
            Some(&a) if a <= 0.0 => return Err(PlanError::ZeroAvailability(l.lang.clone())),
            Some(_) => {}
        }
    }
    Ok(budgets
        .iter()
        .map(|b| {
            let lang_required = per_lang.get(&b.lang).copied().unwrap_or(0) as f64 / BILLION;
            let required = if lang_required == 0.0 {
                0.0
            } else {
                lang_required * b.available_tokens / lang_avail[b.lang.as_str()]
            };
            let epochs = if required == 0.0 { 0.0 } else { required / b.available_tokens };
            DatasetBudget {
                dataset: b.dataset.clone(),
                lang: b.lang.clone(),
                available_tokens: b.available_tokens,
                required_tokens: required,
                epochs,
                warn: epochs > EPOCH_WARN_LIMIT,
                advisory: epochs > EPOCH_ADVISORY_LIMIT,
            }
        })
        .collect())
}

/// Reference per-language token availability (billions) of the filtered
/// and unfiltered pools, usable as a default budget table.
pub fn reference_budgets() -> Vec<BudgetEntry> {
    let rows: [(&str, [Option<f64>; 4]); 7] = [
        ("mC4 EN", [Some(125.0), Some(76.0), Some(75.0), None]),
        ("RPJ2 (base)", [None, Some(310.0), Some(297.0), None]),
        ("RPJ2 (90%)", [None, Some(260.0), Some(248.0), None]),
        ("FineWeb2", [None, Some(270.0), Some(260.0), Some(282.0)]),
        ("FineWeb2 (90%)", [None, Some(34.0), Some(28.0), Some(30.0)]),
        ("TransWebEDU", [Some(54.0), Some(62.0), Some(55.0), Some(45.0)]),
        ("ChineseFineWeb", [Some(192.0), None, None, Some(195.0)]),
    ];
    let langs = ["en", "fr", "de", "zh"];
    rows.iter()
        .flat_map(|(name, cols)| {
            cols.iter()
                .zip(langs)
                .filter_map(move |(v, l)| v.map(|t| BudgetEntry::new(*name, l, t)))
        })
        .collect()
}

/// Per-dataset rows as CSV.
pub fn budget_table_csv(rows: &[DatasetBudget]) -> String {
    let mut out = String::from("dataset,lang,available_tokens_b,required_tokens_b,epochs,warn,advisory\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{},{}",
            csv_field(&r.dataset),
            csv_field(&r.lang),
            r.available_tokens,
            r.required_tokens,
            r.epochs,
            r.warn,
            r.advisory
        );
    }
    out
}

/// Language-by-dataset grid of required tokens, one row per dataset.
pub fn budget_table_markdown(rows: &[DatasetBudget]) -> String {
    let mut langs: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in rows {
        if !langs.contains(&r.lang.as_str()) {
            langs.push(&r.lang);
        }
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let mut out = String::from("| Dataset |");
    for l in &langs {
        let _ = write!(out, " {} |", l.to_uppercase());
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(langs.len()));
    out.push('\n');
    for d in &datasets {
        let _ = write!(out, "| {d} |");
        for l in &langs {
            match rows.iter().find(|r| r.dataset == *d && r.lang == *l) {
                Some(r) => {
                    let flag = if r.warn { " !" } else if r.advisory { " *" } else { "" };
                    let _ = write!(out, " {:.1}/{} ({:.2} ep){flag} |", r.required_tokens, r.available_tokens, r.epochs);
                }
                None => out.push_str(" -- |"),
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
