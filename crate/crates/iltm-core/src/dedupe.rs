//! Meta-training dataset discarding: name sanitization, keyword cleaning,
//! fuzzy name similarity, structural and edge filters, and sample-level
//! leak detection, reported as one verdict per candidate with the first
//! triggered rule as evidence.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tabular::{CellValue, TabularTask};
use rayon::prelude::*;
use std::path::Path;

pub const DEFAULT_LAMBDA: f64 = 0.8;
pub const DEFAULT_LEAK_SAMPLES: usize = 5;
pub const DEFAULT_KEYWORDS: [&str; 6] =
    ["small", "medium", "processed", "classif", "regression", "version"];

const LEAK_TAG: u64 = 0x4c45414b;

#[derive(Debug, Clone, PartialEq)]
pub struct DedupeConfig {
    pub lambda: f64,
    pub leak_samples: usize,
    pub keywords: Vec<String>,
    pub edge_min_features: usize,
    pub edge_min_rows: usize,
    pub edge_max_features: usize,
    pub edge_max_rows: usize,
    pub seed: u64,
}

impl Default for DedupeConfig {
    fn default() -> DedupeConfig {
        DedupeConfig {
            lambda: DEFAULT_LAMBDA,
            leak_samples: DEFAULT_LEAK_SAMPLES,
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            edge_min_features: 2,
            edge_min_rows: 10,
            edge_max_features: 100_000,
            edge_max_rows: 1_000_000,
            seed: 0,
        }
    }
}

impl DedupeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("similarity threshold must lie in [0, 1]"));
        }
        if self.leak_samples == 0 {
            return Err(Error::config("leak sample count must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleId {
    ExplicitEval,
    ExactName,
    KeywordName,
    Substring,
    Levenshtein,
    TokenSort,
    Structural,
    EdgeCase,
    SampleLeak,
    IoError,
}

impl RuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::ExplicitEval => "explicit-eval",
            RuleId::ExactName => "exact-name",
            RuleId::KeywordName => "keyword-name",
            RuleId::Substring => "substring",
            RuleId::Levenshtein => "levenshtein",
            RuleId::TokenSort => "token-sort",
            RuleId::Structural => "structural",
            RuleId::EdgeCase => "edge-case",
            RuleId::SampleLeak => "sample-leak",
            RuleId::IoError => "io-error",
        }
    }
}

/// Per-candidate outcome: at most one triggering rule, first match wins.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscardRecord {
    pub name: String,
    pub verdict: Verdict,
    pub rule: Option<RuleId>,
    pub evidence: String,
}

/// One dataset as the pipeline sees it: identity, shape, and feature rows
/// as canonical multisets (or the reason they could not be read).
#[derive(Debug, Clone)]
pub struct DedupeEntry {
    pub name: String,
    /// Canonical source path; two entries with the same path are the same
    /// physical dataset.
    pub source: Option<String>,
    pub n_rows: usize,
    pub n_features: usize,
    pub rows: std::result::Result<Vec<Vec<String>>, String>,
}

/// Lowercase, trim, and collapse every run of non-alphanumerics to one '-'.
pub fn sanitize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_sep = false;
    for c in s.chars() {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('-');
            }
            pending_sep = false;
            out.extend(c.to_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

/// Sanitize, strip digits inside every token, then drop empty and keyword
/// tokens.
pub fn clean_keywords(s: &str, keywords: &[String]) -> String {
    let sanitized = sanitize_name(s);
    let kept: Vec<String> = sanitized
        .split('-')
        .map(|tok| tok.chars().filter(|c| !c.is_ascii_digit()).collect::<String>())
        .filter(|tok| !tok.is_empty() && !keywords.iter().any(|k| k == tok))
        .collect();
    kept.join("-")
}

/// 1 − edit_distance/max_len, with two empty strings scoring 1.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let max_len = a.len().max(b.len());
    if max_len == 0 {
        return 1.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    1.0 - prev[b.len()] as f64 / max_len as f64
}

/// Sort the names' tokens, rejoin with single spaces, and compare with
/// normalized edit distance.
pub fn token_sort_ratio(a: &str, b: &str) -> f64 {
    let canon = |s: &str| {
        let sanitized = sanitize_name(s);
        let mut tokens: Vec<&str> = sanitized.split('-').filter(|t| !t.is_empty()).collect();
        tokens.sort_unstable();
        tokens.join(" ")
    };
    levenshtein_similarity(&canon(a), &canon(b))
}

fn canonical_cell(cell: CellValue) -> String {
    match cell {
        CellValue::Num(v) => {
            if v == 0.0 {
                "0".to_string()
            } else {
                v.to_string()
            }
        }
        CellValue::Missing => "?".to_string(),
        CellValue::Cat(s) => s.to_string(),
        CellValue::CatUnknown => "?unknown".to_string(),
    }
}

/// The row's feature values in canonical text form, sorted so that equal
/// multisets compare equal regardless of column order.
pub fn row_multiset(task: &TabularTask, row: usize) -> Vec<String> {
    let mut cells: Vec<String> = (0..task.n_features())
        .map(|col| canonical_cell(task.cell(row, col)))
        .collect();
    cells.sort_unstable();
    cells
}

/// Build a pipeline entry from a loaded task, materializing every row of
/// every split as a canonical multiset.
pub fn entry_from_task(task: &TabularTask, source: Option<String>) -> DedupeEntry {
    let rows = (0..task.n_rows()).map(|r| row_multiset(task, r)).collect();
    DedupeEntry {
        name: task.name.clone(),
        source,
        n_rows: task.n_rows(),
        n_features: task.n_features(),
        rows: Ok(rows),
    }
}

struct EvalSide {
    names: Vec<String>,
    sanitized: Vec<String>,
    cleaned: Vec<String>,
    sources: Vec<Option<String>>,
    shapes: Vec<(usize, usize)>,
    sampled: Vec<Vec<Vec<String>>>,
}

fn prepare_evals(evals: &[DedupeEntry], cfg: &DedupeConfig) -> Result<EvalSide> {
    let mut side = EvalSide {
        names: Vec::new(),
        sanitized: Vec::new(),
        cleaned: Vec::new(),
        sources: Vec::new(),
        shapes: Vec::new(),
        sampled: Vec::new(),
    };
    for (idx, eval) in evals.iter().enumerate() {
        let rows = match &eval.rows {
            Ok(rows) => rows,
            Err(msg) => {
                return Err(Error::data(format!(
                    "evaluation dataset '{}' is unreadable: {}",
                    eval.name, msg
                )));
            }
        };
        let sampled = if rows.len() <= cfg.leak_samples {
            rows.clone()
        } else {
            let mut rng = rng_for(cfg.seed, &[LEAK_TAG, idx as u64]);
            let mut picks: Vec<usize> =
                rand::seq::index::sample(&mut rng, rows.len(), cfg.leak_samples)
                    .into_iter()
                    .collect();
            picks.sort_unstable();
            picks.into_iter().map(|i| rows[i].clone()).collect()
        };
        side.names.push(eval.name.clone());
        side.sanitized.push(sanitize_name(&eval.name));
        side.cleaned.push(clean_keywords(&eval.name, &cfg.keywords));
        side.sources.push(eval.source.clone());
        side.shapes.push((eval.n_rows, eval.n_features));
        side.sampled.push(sampled);
    }
    Ok(side)
}

fn judge(candidate: &DedupeEntry, evals: &EvalSide, cfg: &DedupeConfig) -> DiscardRecord {
    let discard = |rule: RuleId, evidence: String| DiscardRecord {
        name: candidate.name.clone(),
        verdict: Verdict::Discard,
        rule: Some(rule),
        evidence,
    };

    if let Some(src) = &candidate.source {
        for (i, eval_src) in evals.sources.iter().enumerate() {
            if eval_src.as_deref() == Some(src.as_str()) {
                return discard(
                    RuleId::ExplicitEval,
                    format!("same source as evaluation dataset '{}'", evals.names[i]),
                );
            }
        }
    }

    let sanitized = sanitize_name(&candidate.name);
    for (i, eval_name) in evals.sanitized.iter().enumerate() {
        if &sanitized == eval_name {
            return discard(
                RuleId::ExactName,
                format!("sanitized name equals evaluation dataset '{}'", evals.names[i]),
            );
        }
    }

    let cleaned = clean_keywords(&candidate.name, &cfg.keywords);
    for (i, eval_name) in evals.cleaned.iter().enumerate() {
        if &cleaned == eval_name {
            return discard(
                RuleId::KeywordName,
                format!(
                    "keyword-cleaned name '{}' equals evaluation dataset '{}'",
                    cleaned, evals.names[i]
                ),
            );
        }
    }

    for (i, eval_name) in evals.sanitized.iter().enumerate() {
        if !eval_name.is_empty() && sanitized.contains(eval_name.as_str()) {
            return discard(
                RuleId::Substring,
                format!("contains evaluation dataset name '{}'", evals.names[i]),
            );
        }
    }

    for (i, eval_name) in evals.sanitized.iter().enumerate() {
        let sim = levenshtein_similarity(&sanitized, eval_name);
        if sim >= cfg.lambda {
            return discard(
                RuleId::Levenshtein,
                format!(
                    "similarity {} to evaluation dataset '{}' meets threshold {}",
                    sim, evals.names[i], cfg.lambda
                ),
            );
        }
    }

    for (i, eval_name) in evals.sanitized.iter().enumerate() {
        let sim = token_sort_ratio(&sanitized, eval_name);
        if sim >= cfg.lambda {
            return discard(
                RuleId::TokenSort,
                format!(
                    "token-sort similarity {} to evaluation dataset '{}' meets threshold {}",
                    sim, evals.names[i], cfg.lambda
                ),
            );
        }
    }

    let shape = (candidate.n_rows, candidate.n_features);
    for (i, eval_shape) in evals.shapes.iter().enumerate() {
        if shape == *eval_shape {
            return discard(
                RuleId::Structural,
                format!(
                    "shape ({}, {}) equals evaluation dataset '{}'",
                    shape.0, shape.1, evals.names[i]
                ),
            );
        }
    }

    if candidate.n_features < cfg.edge_min_features {
        return discard(
            RuleId::EdgeCase,
            format!("{} features < {}", candidate.n_features, cfg.edge_min_features),
        );
    }
    if candidate.n_rows < cfg.edge_min_rows {
        return discard(
            RuleId::EdgeCase,
            format!("{} samples < {}", candidate.n_rows, cfg.edge_min_rows),
        );
    }
    if candidate.n_features > cfg.edge_max_features {
        return discard(
            RuleId::EdgeCase,
            format!("{} features > {}", candidate.n_features, cfg.edge_max_features),
        );
    }
    if candidate.n_rows > cfg.edge_max_rows {
        return discard(
            RuleId::EdgeCase,
            format!("{} samples > {}", candidate.n_rows, cfg.edge_max_rows),
        );
    }

    let rows = match &candidate.rows {
        Ok(rows) => rows,
        Err(msg) => {
            return discard(RuleId::IoError, format!("values unreadable: {}", msg));
        }
    };
    for (i, sampled) in evals.sampled.iter().enumerate() {
        if candidate.n_features != evals.shapes[i].1 {
            continue;
        }
        for probe in sampled {
            if rows.iter().any(|row| row == probe) {
                return discard(
                    RuleId::SampleLeak,
                    format!(
                        "row value multiset matches a sampled row of evaluation dataset '{}'",
                        evals.names[i]
                    ),
                );
            }
        }
    }

    DiscardRecord {
        name: candidate.name.clone(),
        verdict: Verdict::Keep,
        rule: None,
        evidence: String::new(),
    }
}

/// Judge every candidate against the evaluation set. Evaluation datasets
/// must be fully readable; candidate verdicts depend only on the candidate
/// itself, so the output order mirrors the input order.
pub fn run_pipeline(
    candidates: &[DedupeEntry],
    evals: &[DedupeEntry],
    cfg: &DedupeConfig,
) -> Result<Vec<DiscardRecord>> {
    cfg.validate()?;
    let side = prepare_evals(evals, cfg)?;
    Ok(candidates.par_iter().map(|c| judge(c, &side, cfg)).collect())
}

/// Discard file: one CSV row per candidate (name, verdict, rule, evidence).
pub fn write_discard_csv(path: &Path, records: &[DiscardRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io_msg(format!("cannot write discard file: {}", e)))?;
    w.write_record(["name", "verdict", "rule", "evidence"])
        .map_err(|e| Error::io_msg(e.to_string()))?;
    for r in records {
        let verdict = match r.verdict {
            Verdict::Keep => "keep",
            Verdict::Discard => "discard",
        };
        let rule = r.rule.map_or("", |id| id.as_str());
        w.write_record([r.name.as_str(), verdict, rule, r.evidence.as_str()])
            .map_err(|e| Error::io_msg(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io_msg(e.to_string()))?;
    Ok(())
}
