//! Demonstration synthesis from parallel data by post-explanation, and seeded
//! assembly of the four exemplar pools.
//!
//! For each pair with a reference: draft the source, ask the model to name and
//! explain the difficult source words given the reference, then run the same greedy
//! ablation as interpretation quality control but scored against the reference.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::draft_translate;
use crate::iqc::iqc;
use crate::llm::LlmGateway;
use crate::model::{DemonstrationSets, DiffDemo, IgtDemo, InterpDemo, Interpretation, LangPair, MtDemo, SentencePair};
use crate::prompt::{self, PromptKind, Query};
use crate::qe::{QeClient, ReferenceObjective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedDemo {
    /// Id of the validation pair this demo came from.
    pub id: String,
    pub source: String,
    pub reference: String,
    pub draft: String,
    pub words: Vec<String>,
    /// Interpretations that survived reference-based quality control.
    pub interpretations: Vec<(String, String)>,
    pub refined: String,
    /// No difficult words were found; usable only as a translation exemplar.
    #[serde(default)]
    pub mt_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub demos: Vec<SynthesizedDemo>,
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisOptions {
    /// Use at most this many pairs (in input order).
    pub max_pairs: Option<usize>,
    /// Skip pairs whose reference scores below this reference-free QE value.
    pub min_reference_qe: Option<f64>,
}

fn synthesize_one(
    pair: &SentencePair,
    langs: &LangPair,
    base: &DemonstrationSets,
    gateway: &LlmGateway,
    qe: &QeClient,
) -> Result<SynthesizedDemo, String> {
    let reference = pair.reference.as_deref().filter(|r| !r.trim().is_empty()).ok_or("missing reference")?;
    let source = pair.src.as_str();
    let draft = draft_translate(source, langs, base, gateway).map_err(|e| e.to_string())?;
    let prompt = prompt::render(langs, base, &Query::DemoSynth { source, reference }).map_err(|e| e.to_string())?;
    let reply = gateway.greedy(PromptKind::DemoSynth, &prompt).map_err(|e| e.to_string())?;
    let (words, glosses) = prompt::parse_demo_synthesis(&reply).map_err(|e| e.to_string())?;

    let mut demo = SynthesizedDemo {
        id: pair.id.clone(),
        source: source.to_string(),
        reference: reference.to_string(),
        draft: draft.clone(),
        words,
        interpretations: Vec::new(),
        refined: draft.clone(),
        mt_only: false,
    };
    if demo.words.is_empty() {
        demo.mt_only = true;
        return Ok(demo);
    }
    let candidates: Vec<Interpretation> = glosses.iter().map(|(w, g)| Interpretation::candidate(w, g)).collect();
    let objective = ReferenceObjective { client: qe, reference };
    let outcome = iqc(source, &draft, &candidates, langs, base, gateway, &objective).map_err(|e| e.to_string())?;
    demo.interpretations = outcome.kept().map(|i| (i.word.clone(), i.gloss.clone())).collect();
    demo.refined = outcome.final_translation;
    Ok(demo)
}

/// Synthesizes demos pair by pair. Per-pair failures become skip records.
pub fn synthesize(
    pairs: &[SentencePair],
    langs: &LangPair,
    base: &DemonstrationSets,
    gateway: &LlmGateway,
    qe: &QeClient,
    options: &SynthesisOptions,
) -> SynthesisReport {
    let mut report = SynthesisReport::default();
    let limit = options.max_pairs.unwrap_or(usize::MAX);
    for pair in pairs.iter().take(limit) {
        if let (Some(min), Some(reference)) = (options.min_reference_qe, pair.reference.as_deref()) {
            match qe.score_sentence(&pair.src, reference) {
                Ok(score) if score.value < min => {
                    report.skipped.push(SkipRecord {
                        id: pair.id.clone(),
                        reason: format!("reference QE {} below {min}", score.value),
                    });
                    continue;
                }
                Ok(_) => {}
                Err(e) => {
                    report.skipped.push(SkipRecord { id: pair.id.clone(), reason: e.to_string() });
                    continue;
                }
            }
        }
        match synthesize_one(pair, langs, base, gateway, qe) {
            Ok(demo) => report.demos.push(demo),
            Err(reason) => {
                log::warn!("skipping demo synthesis for {}: {reason}", pair.id);
                report.skipped.push(SkipRecord { id: pair.id.clone(), reason });
            }
        }
    }
    report
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
#[error("not enough demos for the {slot} slot: need {needed}, have {available}")]
pub struct AssembleError {
    pub slot: &'static str,
    pub needed: usize,
    pub available: usize,
}

fn choose(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = index::sample(rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Seeded uniform choice of `shots` exemplars per slot. The diff, interpretation and
/// refinement slots share one draw from the demos that have difficult words.
pub fn assemble_sets(demos: &[SynthesizedDemo], shots: usize, seed: u64) -> Result<DemonstrationSets, AssembleError> {
    if shots == 0 {
        return Ok(DemonstrationSets::zero_shot());
    }
    let full: Vec<&SynthesizedDemo> = demos.iter().filter(|d| !d.mt_only).collect();
    if demos.len() < shots {
        return Err(AssembleError { slot: "mt", needed: shots, available: demos.len() });
    }
    if full.len() < shots {
        return Err(AssembleError { slot: "diff", needed: shots, available: full.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mt_pick = choose(demos.len(), shots, &mut rng);
    let full_pick = choose(full.len(), shots, &mut rng);

    let mut sets = DemonstrationSets { shots, ..Default::default() };
    for i in mt_pick {
        let d = &demos[i];
        sets.mt.push(MtDemo { source: d.source.clone(), translation: d.reference.clone() });
    }
    for i in full_pick {
        let d = full[i];
        let glossed: Vec<String> = d.interpretations.iter().map(|(w, _)| w.clone()).collect();
        sets.diff.push(DiffDemo { source: d.source.clone(), draft: d.draft.clone(), words: d.words.clone() });
        sets.intp.push(InterpDemo { source: d.source.clone(), words: glossed, glosses: d.interpretations.clone() });
        sets.igt.push(IgtDemo {
            source: d.source.clone(),
            draft: d.draft.clone(),
            glosses: d.interpretations.clone(),
            refined: d.refined.clone(),
        });
    }
    Ok(sets)
}

#[derive(Debug, thiserror::Error)]
pub enum DemoFileError {
    #[error("cannot access demos file {path}: {message}")]
    Io { path: String, message: String },
    #[error("demos file line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub fn load_demos(path: &Path) -> Result<Vec<SynthesizedDemo>, DemoFileError> {
    let text = fs::read_to_string(path)
        .map_err(|e| DemoFileError::Io { path: path.display().to_string(), message: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DemoFileError::Malformed { line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn write_demos(path: &Path, demos: &[SynthesizedDemo]) -> Result<(), DemoFileError> {
    let io = |e: std::io::Error| DemoFileError::Io { path: path.display().to_string(), message: e.to_string() };
    let mut f = fs::File::create(path).map_err(io)?;
    for d in demos {
        writeln!(f, "{}", serde_json::to_string(d).expect("demo serializes")).map_err(io)?;
    }
    Ok(())
}
