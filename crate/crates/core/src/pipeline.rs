//! Per-sentence orchestration and the ordered batch runner.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::detection::{self, DetectionError};
use crate::iqc::{self, IqcFailure, IqcOutcome};
use crate::llm::LlmGateway;
use crate::model::{DemonstrationSets, DifficultWord, LangPair, Mode, PipelineConfig, SentencePair, TranslationRecord};
use crate::qe::{QeClient, QeObjective};

/// Experiment switches that remove one pipeline component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Ask for difficult words with an empty draft section.
    pub without_draft: bool,
    /// Refine once with all interpretations, no ablation loop.
    pub without_iqc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{id}: {stage} failed: {message}")]
pub struct SentenceFailure {
    pub id: String,
    pub stage: String,
    pub message: String,
}

impl SentenceFailure {
    fn new(pair: &SentencePair, stage: &str, err: impl ToString) -> Self {
        SentenceFailure { id: pair.id.clone(), stage: stage.to_string(), message: err.to_string() }
    }
}

/// Draft and detection output, before any threshold is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub draft: String,
    pub candidates: Vec<DifficultWord>,
}

pub struct Pipeline {
    pub pair: LangPair,
    pub demos: DemonstrationSets,
    pub config: PipelineConfig,
    pub ablation: Ablation,
    pub gateway: LlmGateway,
    pub qe: QeClient,
}

impl Pipeline {
    /// Draft, then detection: one greedy pass for DUAT-I, scored sampling union for DUAT-E.
    pub fn prepare(&self, input: &SentencePair) -> Result<Prepared, SentenceFailure> {
        let source = input.src.as_str();
        let draft = detection::draft_translate(source, &self.pair, &self.demos, &self.gateway)
            .map_err(|e| SentenceFailure::new(input, "draft", e))?;
        let prompt_draft = if self.ablation.without_draft { "" } else { draft.as_str() };
        let detect = |e: DetectionError| SentenceFailure::new(input, "detect", e);
        let candidates = match self.config.mode {
            Mode::DuatI => detection::detect_intrinsic(source, prompt_draft, &self.pair, &self.demos, &self.gateway)
                .map_err(detect)?,
            Mode::DuatE => detection::scored_candidates(
                source,
                prompt_draft,
                &draft,
                &self.pair,
                &self.demos,
                &self.gateway,
                &self.qe,
                self.config.sample_count,
                self.config.sample_temperature,
            )
            .map_err(detect)?,
        };
        Ok(Prepared { draft, candidates })
    }

    pub fn select(&self, prepared: &Prepared, tau: f64) -> Vec<DifficultWord> {
        match self.config.mode {
            Mode::DuatI => prepared.candidates.clone(),
            Mode::DuatE => detection::select_by_threshold(&prepared.candidates, tau),
        }
    }

    /// Interpretation, refinement and scoring for one selected set.
    pub fn finish(
        &self,
        input: &SentencePair,
        prepared: &Prepared,
        selected: Vec<DifficultWord>,
        tau: Option<f64>,
    ) -> Result<TranslationRecord, SentenceFailure> {
        let source = input.src.as_str();
        let mut record = TranslationRecord {
            id: input.id.clone(),
            pair: self.pair.clone(),
            input: input.clone(),
            mode: self.config.mode,
            tau,
            draft: prepared.draft.clone(),
            candidates: prepared.candidates.clone(),
            selected,
            interpretations: Vec::new(),
            shortfall: Vec::new(),
            iqc_trace: Vec::new(),
            final_translation: prepared.draft.clone(),
            final_qe: self
                .qe
                .score_sentence(source, &prepared.draft)
                .map_err(|e| SentenceFailure::new(input, "score", e))?,
        };
        if record.selected.is_empty() {
            return Ok(record);
        }

        let interp = iqc::interpret(
            source,
            &record.selected,
            &self.pair,
            &self.demos,
            &self.gateway,
            self.config.interpretation_language,
        )
        .map_err(|e| SentenceFailure::new(input, "interpret", e))?;
        record.shortfall = interp.shortfall;

        let objective = QeObjective(&self.qe);
        let run = if self.ablation.without_iqc { iqc::without_iqc } else { iqc::iqc };
        let outcome: IqcOutcome =
            run(source, &prepared.draft, &interp.interpretations, &self.pair, &self.demos, &self.gateway, &objective)
                .map_err(|e: IqcFailure| SentenceFailure::new(input, "iqc", e))?;
        record.interpretations = outcome.interpretations;
        record.iqc_trace = outcome.trace;
        record.final_translation = outcome.final_translation;
        record.final_qe = outcome.final_score;
        Ok(record)
    }

    pub fn translate(&self, input: &SentencePair) -> Result<TranslationRecord, SentenceFailure> {
        let prepared = self.prepare(input)?;
        let tau = match self.config.mode {
            Mode::DuatI => None,
            Mode::DuatE => Some(self.config.difficulty_threshold),
        };
        let selected = self.select(&prepared, self.config.difficulty_threshold);
        self.finish(input, &prepared, selected, tau)
    }

    /// One record per τ, reusing the draft and scored candidates across the grid.
    pub fn sweep(&self, input: &SentencePair, grid: &[f64]) -> Result<Vec<TranslationRecord>, SentenceFailure> {
        let prepared = self.prepare(input)?;
        grid.iter()
            .map(|&tau| {
                let selected = self.select(&prepared, tau);
                self.finish(input, &prepared, selected, Some(tau))
            })
            .collect()
    }
}

/// Runs `work` over `items` on up to `jobs` threads and hands results to `sink`
/// in input order, as soon as each prefix is complete.
pub fn run_ordered<I, T, E, W, S>(items: &[I], jobs: usize, work: W, mut sink: S)
where
    I: Sync,
    T: Send,
    E: Send,
    W: Fn(&I) -> Result<T, E> + Sync,
    S: FnMut(usize, Result<T, E>),
{
    let jobs = jobs.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        for _ in 0..jobs {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, work(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut emit = 0;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&emit) {
                sink(emit, result);
                emit += 1;
            }
        }
    });
}
