//! Draft translation and difficult-word detection.
//!
//! Intrinsic detection asks the model once (greedy) for the mistranslated source
//! words. External detection samples the same prompt `K` times, takes the union
//! of the parsed lists as candidates, scores each candidate's misalignment against
//! the draft with token-level QE, and keeps those scoring strictly above `τ`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::llm::{LlmError, LlmGateway};
use crate::model::{DemonstrationSets, DifficultWord, LangPair, Mode, WordOrigin};
use crate::prompt::{self, PromptError, PromptKind, Query};
use crate::qe::{QeClient, QeError};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum DetectionError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("empty draft")]
    EmptyDraft,
    #[error("scoring candidate {word:?} failed: {source}")]
    Qe {
        word: String,
        source: QeError,
        /// Candidates scored before the failure.
        partial: Vec<DifficultWord>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub draft: String,
    pub candidates: Vec<DifficultWord>,
    pub selected: Vec<DifficultWord>,
    pub mode: Mode,
    pub tau: Option<f64>,
}

/// Greedy few-shot translation used as the draft ỹ.
pub fn draft_translate(
    source: &str,
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
) -> Result<String, DetectionError> {
    let prompt = prompt::render(pair, demos, &Query::Mt { source })?;
    let draft = gateway.greedy(PromptKind::Mt, &prompt)?.trim().to_string();
    if draft.is_empty() {
        return Err(DetectionError::EmptyDraft);
    }
    Ok(draft)
}

/// One greedy detection pass; scores are absent.
pub fn detect_intrinsic(
    source: &str,
    draft: &str,
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
) -> Result<Vec<DifficultWord>, DetectionError> {
    let prompt = prompt::render(pair, demos, &Query::DiffDetect { source, draft })?;
    let reply = gateway.greedy(PromptKind::DiffDetect, &prompt)?;
    Ok(prompt::parse_difficult_words(&reply)
        .iter()
        .map(|w| DifficultWord::new(source, w, WordOrigin::IntrinsicGreedy))
        .collect())
}

/// Union of parsed draws, ordered by first appearance (draw index, then position).
pub fn union_candidates(draws: &[Vec<String>]) -> Vec<String> {
    let mut seen = HashSet::new();
    draws.iter().flatten().filter(|w| seen.insert(w.as_str())).cloned().collect()
}

/// Keeps scored candidates with φ(d) > τ, preserving order. Unscored candidates never pass.
pub fn select_by_threshold(candidates: &[DifficultWord], tau: f64) -> Vec<DifficultWord> {
    candidates
        .iter()
        .filter(|w| w.score.is_some_and(|s| s > tau))
        .map(|w| DifficultWord { origin: WordOrigin::Selected, ..w.clone() })
        .collect()
}

/// Samples and scores candidates without applying a threshold.
#[allow(clippy::too_many_arguments)]
pub fn scored_candidates(
    source: &str,
    prompt_draft: &str,
    draft: &str,
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
    qe: &QeClient,
    samples: usize,
    temperature: f64,
) -> Result<Vec<DifficultWord>, DetectionError> {
    let prompt = prompt::render(pair, demos, &Query::DiffDetect { source, draft: prompt_draft })?;
    let replies = gateway.sample_k(PromptKind::DiffDetect, &prompt, samples, temperature)?;
    let draws: Vec<Vec<String>> = replies.iter().map(|r| prompt::parse_difficult_words(r)).collect();
    let mut scored = Vec::new();
    for surface in union_candidates(&draws) {
        let word = DifficultWord::new(source, &surface, WordOrigin::Sampled);
        match qe.score_source_span(source, draft, &word.surface) {
            Ok(score) => scored.push(word.with_score(score.value)),
            Err(e) => return Err(DetectionError::Qe { word: word.surface, source: e, partial: scored }),
        }
    }
    Ok(scored)
}

/// Sampling-union detection with difficulty-aware selection.
#[allow(clippy::too_many_arguments)]
pub fn detect_external(
    source: &str,
    draft: &str,
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
    qe: &QeClient,
    samples: usize,
    temperature: f64,
    tau: f64,
) -> Result<DetectionResult, DetectionError> {
    let candidates = scored_candidates(source, draft, draft, pair, demos, gateway, qe, samples, temperature)?;
    let selected = select_by_threshold(&candidates, tau);
    Ok(DetectionResult { draft: draft.to_string(), candidates, selected, mode: Mode::DuatE, tau: Some(tau) })
}
