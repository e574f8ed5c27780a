//! Cross-lingual interpretation, interpretation-guided refinement, and
//! interpretation quality control (greedy one-at-a-time ablation).
//!
//! Quality control walks the interpretations in their original order. Each step
//! refines the draft with the current surviving set minus one interpretation;
//! the removal sticks only when the objective strictly improves on the incumbent.
//! That is exactly `1 + |A|` refinement calls.

use serde::{Deserialize, Serialize};

use crate::llm::{LlmError, LlmGateway};
use crate::model::{
    DemonstrationSets, DifficultWord, Interpretation, InterpretationLanguage, InterpretationStatus, IqcStep, LangPair,
};
use crate::prompt::{self, ParseError, PromptError, PromptKind, Query};
use crate::qe::{QeError, QeScore, SentenceObjective};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum IqcError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Qe(#[from] QeError),
    #[error("empty refined translation")]
    EmptyTranslation,
}

/// Interpretation failure together with the steps completed before it.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
#[error("{error} (after {} quality-control step(s))", trace.len())]
pub struct IqcFailure {
    pub error: IqcError,
    pub trace: Vec<IqcStep>,
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for IqcFailure {
            fn from(e: $t) -> Self {
                IqcFailure { error: e.into(), trace: Vec::new() }
            }
        }
    )*};
}

failure_from!(IqcError, PromptError, LlmError, QeError);

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterpretOutcome {
    pub interpretations: Vec<Interpretation>,
    /// Words the model did not gloss; they proceed uninterpreted.
    pub shortfall: Vec<String>,
    /// Unparseable reply, kept for audit.
    pub parse_error: Option<ParseError>,
}

fn language_name(pair: &LangPair, mode: InterpretationLanguage) -> &str {
    match mode {
        InterpretationLanguage::Target => &pair.tgt_name,
        InterpretationLanguage::Source | InterpretationLanguage::SourceThenTranslate => &pair.src_name,
    }
}

/// Glosses each selected word with one greedy call. In `SourceThenTranslate` mode
/// every source-language gloss is then translated with the translation prompt.
pub fn interpret(
    source: &str,
    words: &[DifficultWord],
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
    mode: InterpretationLanguage,
) -> Result<InterpretOutcome, IqcError> {
    if words.is_empty() {
        return Ok(InterpretOutcome::default());
    }
    let surfaces: Vec<String> = words.iter().map(|w| w.surface.clone()).collect();
    let query = Query::Interp { source, words: &surfaces, language: language_name(pair, mode) };
    let prompt = prompt::render(pair, demos, &query)?;
    let reply = gateway.greedy(PromptKind::Interp, &prompt)?;
    let parsed = match prompt::parse_interpretations(&reply, &surfaces) {
        Ok(parsed) => parsed,
        Err(e) => {
            log::warn!("interpretation reply unparseable; proceeding without glosses");
            return Ok(InterpretOutcome { interpretations: Vec::new(), shortfall: surfaces, parse_error: Some(e) });
        }
    };
    let mut interpretations = Vec::with_capacity(parsed.glosses.len());
    for (word, gloss) in parsed.glosses {
        let gloss = if mode == InterpretationLanguage::SourceThenTranslate {
            let mt = prompt::render(pair, demos, &Query::Mt { source: &gloss })?;
            gateway.greedy(PromptKind::Mt, &mt)?.trim().to_string()
        } else {
            gloss
        };
        if gloss.is_empty() {
            continue;
        }
        interpretations.push(Interpretation::candidate(word, gloss));
    }
    Ok(InterpretOutcome { interpretations, shortfall: parsed.shortfall, parse_error: None })
}

/// Refines `draft` under the given interpretations (possibly none).
pub fn guided_translate(
    source: &str,
    draft: &str,
    interpretations: &[Interpretation],
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
) -> Result<String, IqcError> {
    let glosses: Vec<(String, String)> = interpretations.iter().map(|i| (i.word.clone(), i.gloss.clone())).collect();
    let prompt = prompt::render(pair, demos, &Query::IgtRefine { source, draft, glosses: &glosses })?;
    let out = gateway.greedy(PromptKind::IgtRefine, &prompt)?.trim().to_string();
    if out.is_empty() {
        return Err(IqcError::EmptyTranslation);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqcOutcome {
    /// All input interpretations, each marked kept or removed (with the removing step).
    pub interpretations: Vec<Interpretation>,
    pub initial_translation: String,
    pub initial_score: QeScore,
    pub final_translation: String,
    pub final_score: QeScore,
    pub trace: Vec<IqcStep>,
}

impl IqcOutcome {
    pub fn kept(&self) -> impl Iterator<Item = &Interpretation> {
        self.interpretations.iter().filter(|i| i.status == InterpretationStatus::Kept)
    }
}

/// Greedy interpretation ablation maximizing `objective`.
pub fn iqc(
    source: &str,
    draft: &str,
    interpretations: &[Interpretation],
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
    objective: &dyn SentenceObjective,
) -> Result<IqcOutcome, IqcFailure> {
    let initial = guided_translate(source, draft, interpretations, pair, demos, gateway)?;
    let initial_score = objective.score(source, &initial)?;

    let mut removed: Vec<Option<usize>> = vec![None; interpretations.len()];
    let mut best = initial.clone();
    let mut best_score = initial_score.clone();
    let mut trace = Vec::with_capacity(interpretations.len());

    for i in 0..interpretations.len() {
        let ablated: Vec<Interpretation> = interpretations
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i && removed[*j].is_none())
            .map(|(_, a)| a.clone())
            .collect();
        let fail = |error: IqcError, trace: &[IqcStep]| IqcFailure { error, trace: trace.to_vec() };
        let candidate = guided_translate(source, draft, &ablated, pair, demos, gateway).map_err(|e| fail(e, &trace))?;
        let score = objective.score(source, &candidate).map_err(|e| fail(e.into(), &trace))?;
        let accepted = score.strictly_better_than(&best_score).map_err(|e| fail(e.into(), &trace))?;
        trace.push(IqcStep {
            i,
            word: interpretations[i].word.clone(),
            s_hat: best_score.value,
            s_bar: score.value,
            accepted,
        });
        if accepted {
            removed[i] = Some(i);
            best = candidate;
            best_score = score;
        }
    }

    let interpretations = interpretations
        .iter()
        .zip(&removed)
        .map(|(a, r)| Interpretation {
            status: match r {
                Some(step) => InterpretationStatus::Removed { step: *step },
                None => InterpretationStatus::Kept,
            },
            ..a.clone()
        })
        .collect();
    Ok(IqcOutcome {
        interpretations,
        initial_translation: initial,
        initial_score,
        final_translation: best,
        final_score: best_score,
        trace,
    })
}

/// Refinement with every interpretation and no ablation (a single refinement call).
pub fn without_iqc(
    source: &str,
    draft: &str,
    interpretations: &[Interpretation],
    pair: &LangPair,
    demos: &DemonstrationSets,
    gateway: &LlmGateway,
    objective: &dyn SentenceObjective,
) -> Result<IqcOutcome, IqcFailure> {
    let translation = guided_translate(source, draft, interpretations, pair, demos, gateway)?;
    let score = objective.score(source, &translation)?;
    Ok(IqcOutcome {
        interpretations: interpretations
            .iter()
            .map(|a| Interpretation { status: InterpretationStatus::Kept, ..a.clone() })
            .collect(),
        initial_translation: translation.clone(),
        initial_score: score.clone(),
        final_translation: translation,
        final_score: score,
        trace: Vec::new(),
    })
}
