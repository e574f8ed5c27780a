//! Hard-sample benchmark construction: per-system bottom-ρ selection, intersection
//! across systems, and an even seeded split.
//!
//! Ties at the ρ cutoff go to the lexicographically smaller id. The cutoff count is
//! `⌊ρ·n⌋`, computed with a small epsilon so that e.g. 0.3·10 yields 3.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::SentencePair;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum BenchError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("system {system}: ρ must be in (0, 1], got {rho}")]
    Rho { system: String, rho: f64 },
    #[error("at least 2 systems are required, got {0}")]
    TooFewSystems(usize),
    #[error("system {system}: duplicate score for id {id}")]
    DuplicateId { system: String, id: String },
    #[error("system {system}: no score for id {id}")]
    MissingId { system: String, id: String },
    #[error("system {system}: score for unknown id {id}")]
    UnknownId { system: String, id: String },
    #[error("system {system}: non-finite score for id {id}")]
    NonFinite { system: String, id: String },
    #[error("nothing to split")]
    EmptySplit,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemScores {
    pub system: String,
    pub scores: Vec<(String, f64)>,
    pub rho: f64,
}

impl SystemScores {
    pub fn new(system: impl Into<String>, scores: Vec<(String, f64)>, rho: f64) -> Result<Self, BenchError> {
        let s = SystemScores { system: system.into(), scores, rho };
        if !(s.rho > 0.0 && s.rho <= 1.0) {
            return Err(BenchError::Rho { system: s.system, rho: s.rho });
        }
        let mut seen = HashSet::new();
        for (id, v) in &s.scores {
            if !v.is_finite() {
                return Err(BenchError::NonFinite { system: s.system.clone(), id: id.clone() });
            }
            if !seen.insert(id.as_str()) {
                return Err(BenchError::DuplicateId { system: s.system.clone(), id: id.clone() });
            }
        }
        Ok(s)
    }

    /// Scores must cover every corpus id exactly once.
    pub fn check_coverage(&self, corpus_ids: &[&str]) -> Result<(), BenchError> {
        let have: HashSet<&str> = self.scores.iter().map(|(id, _)| id.as_str()).collect();
        let want: HashSet<&str> = corpus_ids.iter().copied().collect();
        if let Some(id) = corpus_ids.iter().find(|id| !have.contains(*id)) {
            return Err(BenchError::MissingId { system: self.system.clone(), id: id.to_string() });
        }
        if let Some((id, _)) = self.scores.iter().find(|(id, _)| !want.contains(id.as_str())) {
            return Err(BenchError::UnknownId { system: self.system.clone(), id: id.clone() });
        }
        Ok(())
    }
}

pub fn cutoff(rho: f64, n: usize) -> usize {
    ((rho * n as f64 + 1e-9).floor() as usize).min(n)
}

/// The `⌊ρ·n⌋` lowest-scoring ids.
pub fn bottom_rho(scores: &SystemScores) -> Result<BTreeSet<String>, BenchError> {
    if scores.scores.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    if !(scores.rho > 0.0 && scores.rho <= 1.0) {
        return Err(BenchError::Rho { system: scores.system.clone(), rho: scores.rho });
    }
    let mut ranked: Vec<&(String, f64)> = scores.scores.iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let k = cutoff(scores.rho, ranked.len());
    if k == 0 {
        log::warn!("system {}: ρ={} selects no samples out of {}", scores.system, scores.rho, ranked.len());
    }
    Ok(ranked.into_iter().take(k).map(|(id, _)| id.clone()).collect())
}

pub fn intersect_hard(sets: &[BTreeSet<String>]) -> Result<BTreeSet<String>, BenchError> {
    if sets.len() < 2 {
        return Err(BenchError::TooFewSystems(sets.len()));
    }
    let mut out = sets[0].clone();
    for s in &sets[1..] {
        out.retain(|id| s.contains(id));
    }
    if out.is_empty() {
        log::warn!("the hard-sample intersection is empty; consider a larger ρ");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSplit {
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of the ids in sorted order, then halve. Validation takes the odd one.
pub fn split_even(ids: &BTreeSet<String>, seed: u64) -> Result<BenchmarkSplit, BenchError> {
    if ids.is_empty() {
        return Err(BenchError::EmptySplit);
    }
    let mut all: Vec<String> = ids.iter().cloned().collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = all.split_off(ids.len().div_ceil(2));
    Ok(BenchmarkSplit { validation: all, test })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub mean_source_len: f64,
    pub mean_target_len: f64,
    pub source_unit: String,
    pub target_unit: String,
}

/// Languages written without spaces between words; lengths are counted in characters.
const UNSEGMENTED: &[&str] = &["zh", "ja", "th", "lo", "km", "my", "bo"];

pub fn text_length(text: &str, lang: &str) -> usize {
    if uses_characters(lang) {
        text.chars().filter(|c| !c.is_whitespace()).count()
    } else {
        text.split_whitespace().count()
    }
}

fn uses_characters(lang: &str) -> bool {
    let base = lang.split(['-', '_']).next().unwrap_or(lang).to_ascii_lowercase();
    UNSEGMENTED.contains(&base.as_str())
}

fn unit(lang: &str) -> String {
    if uses_characters(lang) { "characters" } else { "tokens" }.to_string()
}

/// Sample count and mean lengths. Target lengths average over pairs with a reference.
pub fn corpus_stats(pairs: &[SentencePair], src_lang: &str, tgt_lang: &str) -> CorpusStats {
    let mut stats = CorpusStats { source_unit: unit(src_lang), target_unit: unit(tgt_lang), ..Default::default() };
    if pairs.is_empty() {
        return stats;
    }
    stats.samples = pairs.len();
    let src_total: usize = pairs.iter().map(|p| text_length(&p.src, src_lang)).sum();
    stats.mean_source_len = src_total as f64 / pairs.len() as f64;
    let refs: Vec<&str> = pairs.iter().filter_map(|p| p.reference.as_deref()).collect();
    if !refs.is_empty() {
        let tgt_total: usize = refs.iter().map(|r| text_length(r, tgt_lang)).sum();
        stats.mean_target_len = tgt_total as f64 / refs.len() as f64;
    }
    stats
}

#[derive(Deserialize)]
struct RawScore {
    id: serde_json::Value,
    score: f64,
}

/// Reads `{"id": .., "score": ..}` lines.
pub fn load_scores(path: &Path) -> Result<Vec<(String, f64)>, BenchError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| BenchError::Io { path: p.clone(), message: e.to_string() })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| BenchError::Malformed { path: p.clone(), line: i + 1, message };
        let raw: RawScore = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(malformed(format!("id must be a string or number, got {other}"))),
        };
        out.push((id, raw.score));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub id: String,
    pub src: String,
    #[serde(rename = "ref", skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchCounts {
    pub corpus: usize,
    pub per_system: BTreeMap<String, usize>,
    pub intersection: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub systems: Vec<String>,
    pub rho: BTreeMap<String, f64>,
    pub seed: u64,
    pub counts: BenchCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub records: Vec<BenchRecord>,
    pub split: BenchmarkSplit,
    pub manifest: BenchManifest,
}

/// Full construction. Records come out in corpus order, tagged with their split.
pub fn build_benchmark(corpus: &[SentencePair], systems: &[SystemScores], seed: u64) -> Result<Benchmark, BenchError> {
    if corpus.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    if systems.len() < 2 {
        return Err(BenchError::TooFewSystems(systems.len()));
    }
    let ids: Vec<&str> = corpus.iter().map(|p| p.id.as_str()).collect();
    let mut counts = BenchCounts { corpus: corpus.len(), ..Default::default() };
    let mut hard = Vec::new();
    for s in systems {
        s.check_coverage(&ids)?;
        let bottom = bottom_rho(s)?;
        counts.per_system.insert(s.system.clone(), bottom.len());
        hard.push(bottom);
    }
    let selected = intersect_hard(&hard)?;
    counts.intersection = selected.len();
    let split = if selected.is_empty() {
        BenchmarkSplit { validation: vec![], test: vec![] }
    } else {
        split_even(&selected, seed)?
    };
    counts.validation = split.validation.len();
    counts.test = split.test.len();

    let validation: HashSet<&str> = split.validation.iter().map(String::as_str).collect();
    let records = corpus
        .iter()
        .filter(|p| selected.contains(&p.id))
        .map(|p| BenchRecord {
            id: p.id.clone(),
            src: p.src.clone(),
            reference: p.reference.clone(),
            split: if validation.contains(p.id.as_str()) { "validation" } else { "test" }.to_string(),
        })
        .collect();
    let manifest = BenchManifest {
        systems: systems.iter().map(|s| s.system.clone()).collect(),
        rho: systems.iter().map(|s| (s.system.clone(), s.rho)).collect(),
        seed,
        counts,
    };
    Ok(Benchmark { records, split, manifest })
}
