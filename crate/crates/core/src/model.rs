//! Shared domain types, corpus loading and pipeline configuration.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::qe::{self, QeScore, ScorerLevel};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: missing field {field}")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: empty source text")]
    EmptySource { line: usize },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("sample_count must be ≥ 1")]
    ZeroSamples,
    #[error("sample_temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("difficulty_threshold {tau} outside scorer range [{lo}, {hi}]")]
    Threshold { tau: f64, lo: f64, hi: f64 },
    #[error("unknown {level} scorer id {id}")]
    UnknownScorer { level: &'static str, id: String },
    #[error("retry policy needs at least one attempt")]
    Retry,
    #[error("max_in_flight must be ≥ 1")]
    InFlight,
    #[error("max_output_tokens must be ≥ 1")]
    OutputTokens,
    #[error("invalid language pair: {0}")]
    LangPair(String),
}

/// Source and target language, with the display names inserted into prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangPair {
    pub src: String,
    pub tgt: String,
    pub src_name: String,
    pub tgt_name: String,
}

const LANGUAGE_NAMES: &[(&str, &str)] = &[
    ("ar", "Arabic"),
    ("cs", "Czech"),
    ("de", "German"),
    ("en", "English"),
    ("es", "Spanish"),
    ("et", "Estonian"),
    ("fi", "Finnish"),
    ("fr", "French"),
    ("is", "Icelandic"),
    ("it", "Italian"),
    ("ja", "Japanese"),
    ("ko", "Korean"),
    ("pt", "Portuguese"),
    ("ru", "Russian"),
    ("th", "Thai"),
    ("uk", "Ukrainian"),
    ("zh", "Chinese"),
];

/// Display name for a known language code.
pub fn language_name(code: &str) -> Option<&'static str> {
    LANGUAGE_NAMES.iter().find(|(c, _)| c.eq_ignore_ascii_case(code)).map(|(_, n)| *n)
}

impl LangPair {
    /// Builds a pair from codes, resolving display names from the built-in table.
    pub fn new(src: &str, tgt: &str) -> Result<Self, ConfigError> {
        let src_name =
            language_name(src).ok_or_else(|| ConfigError::LangPair(format!("no display name for {src:?}")))?;
        let tgt_name =
            language_name(tgt).ok_or_else(|| ConfigError::LangPair(format!("no display name for {tgt:?}")))?;
        Self::with_names(src, tgt, src_name, tgt_name)
    }

    pub fn with_names(src: &str, tgt: &str, src_name: &str, tgt_name: &str) -> Result<Self, ConfigError> {
        let pair = LangPair {
            src: src.trim().to_string(),
            tgt: tgt.trim().to_string(),
            src_name: src_name.trim().to_string(),
            tgt_name: tgt_name.trim().to_string(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.src.is_empty() || self.tgt.is_empty() {
            return Err(ConfigError::LangPair("empty language code".into()));
        }
        if self.src.eq_ignore_ascii_case(&self.tgt) {
            return Err(ConfigError::LangPair(format!("source and target are both {:?}", self.src)));
        }
        if self.src_name.is_empty() || self.tgt_name.is_empty() {
            return Err(ConfigError::LangPair("empty display name".into()));
        }
        Ok(())
    }
}

/// One corpus entry. Keys serialize exactly as `id`, `src`, `ref`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub src: String,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl SentencePair {
    pub fn new(id: impl Into<String>, src: impl Into<String>, reference: Option<String>) -> Self {
        SentencePair { id: id.into(), src: src.into(), reference }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Guesses the format from the file extension; anything but `.tsv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<SentencePair>, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_corpus(&text, format)
}

#[derive(Deserialize)]
struct RawJsonlRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    src: Option<String>,
    #[serde(rename = "ref", default)]
    reference: Option<String>,
}

/// Parses corpus text. Blank lines are skipped but still count towards line numbers,
/// which also serve as ids for records that carry none.
pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Vec<SentencePair>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let pair = match format {
            CorpusFormat::Jsonl => parse_jsonl_line(line, line_no)?,
            CorpusFormat::Tsv => {
                let mut cols = line.splitn(2, '\t');
                let src = cols.next().unwrap_or_default().to_string();
                let reference = cols.next().map(str::to_string).filter(|r| !r.trim().is_empty());
                SentencePair::new(line_no.to_string(), src, reference)
            }
        };
        if pair.src.trim().is_empty() {
            return Err(CorpusError::EmptySource { line: line_no });
        }
        if !seen.insert(pair.id.clone()) {
            return Err(CorpusError::DuplicateId { line: line_no, id: pair.id });
        }
        out.push(pair);
    }
    Ok(out)
}

fn parse_jsonl_line(line: &str, line_no: usize) -> Result<SentencePair, CorpusError> {
    let raw: RawJsonlRecord =
        serde_json::from_str(line).map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
    let src = raw.src.ok_or(CorpusError::MissingField { line: line_no, field: "src" })?;
    let id = match raw.id {
        None | Some(serde_json::Value::Null) => line_no.to_string(),
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(other) => {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: format!("id must be a string or number, got {other}"),
            })
        }
    };
    Ok(SentencePair::new(id, src, raw.reference))
}

/// NFC-normalizes text before any surface comparison.
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Case-sensitive substring test after NFC normalization of both sides.
pub fn is_anchored(source: &str, surface: &str) -> bool {
    !surface.is_empty() && nfc(source).contains(&nfc(surface))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordOrigin {
    IntrinsicGreedy,
    Sampled,
    Selected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultWord {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub origin: WordOrigin,
    /// False when the surface is not a substring of the source (LLM paraphrase).
    pub anchored: bool,
}

impl DifficultWord {
    pub fn new(source: &str, surface: &str, origin: WordOrigin) -> Self {
        let surface = nfc(surface.trim());
        DifficultWord { anchored: is_anchored(source, &surface), surface, score: None, origin }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpretationStatus {
    Candidate,
    Kept,
    /// Removed by the quality-control step with this index.
    Removed {
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub word: String,
    pub gloss: String,
    pub status: InterpretationStatus,
}

impl Interpretation {
    pub fn candidate(word: impl Into<String>, gloss: impl Into<String>) -> Self {
        Interpretation { word: word.into(), gloss: gloss.into(), status: InterpretationStatus::Candidate }
    }

    pub fn is_removed(&self) -> bool {
        matches!(self.status, InterpretationStatus::Removed { .. })
    }
}

/// One ablation step of interpretation quality control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqcStep {
    pub i: usize,
    pub word: String,
    pub s_hat: f64,
    pub s_bar: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtDemo {
    pub source: String,
    pub translation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffDemo {
    pub source: String,
    pub draft: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpDemo {
    pub source: String,
    pub words: Vec<String>,
    pub glosses: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgtDemo {
    pub source: String,
    pub draft: String,
    pub glosses: Vec<(String, String)>,
    pub refined: String,
}

/// The four exemplar pools used for in-context prompting, plus the shot count.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DemonstrationSets {
    pub mt: Vec<MtDemo>,
    pub diff: Vec<DiffDemo>,
    pub intp: Vec<InterpDemo>,
    pub igt: Vec<IgtDemo>,
    pub shots: usize,
}

impl DemonstrationSets {
    pub fn zero_shot() -> Self {
        DemonstrationSets::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    DuatI,
    DuatE,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::DuatI => "duat-i",
            Mode::DuatE => "duat-e",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpretationLanguage {
    Target,
    Source,
    SourceThenTranslate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay_ms: 0, max_delay_ms: 0 }
    }

    /// Backoff before attempt `attempt` (1-based; the first attempt never waits).
    pub fn delay_ms(&self, attempt: u32) -> u64 {
        if attempt <= 1 {
            return 0;
        }
        let exp = (attempt - 2).min(20);
        self.base_delay_ms.saturating_mul(1 << exp).min(self.max_delay_ms)
    }
}

pub const DEFAULT_SHOTS: usize = 8;
pub const DEFAULT_SAMPLE_COUNT: usize = 5;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.14;
pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub shots: usize,
    pub sample_count: usize,
    pub sample_temperature: f64,
    pub difficulty_threshold: f64,
    pub interpretation_language: InterpretationLanguage,
    pub qe_sentence_scorer: String,
    pub qe_token_scorer: String,
    pub qe_reference_scorer: String,
    pub llm_backend: String,
    pub max_output_tokens: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::DuatE,
            shots: DEFAULT_SHOTS,
            sample_count: DEFAULT_SAMPLE_COUNT,
            sample_temperature: DEFAULT_TEMPERATURE,
            difficulty_threshold: DEFAULT_THRESHOLD,
            interpretation_language: InterpretationLanguage::Target,
            qe_sentence_scorer: qe::STUB_SENTENCE.to_string(),
            qe_token_scorer: qe::STUB_TOKEN.to_string(),
            qe_reference_scorer: qe::STUB_REFERENCE.to_string(),
            llm_backend: "scripted".to_string(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

/// Partially specified configuration, as read from a config file or flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialConfig {
    pub mode: Option<Mode>,
    pub shots: Option<usize>,
    pub sample_count: Option<usize>,
    pub sample_temperature: Option<f64>,
    pub difficulty_threshold: Option<f64>,
    pub interpretation_language: Option<InterpretationLanguage>,
    pub qe_sentence_scorer: Option<String>,
    pub qe_token_scorer: Option<String>,
    pub qe_reference_scorer: Option<String>,
    pub llm_backend: Option<String>,
    pub max_output_tokens: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub retry: Option<RetryPolicy>,
}

impl PartialConfig {
    /// Fields set in `other` win.
    pub fn overlay(self, other: PartialConfig) -> PartialConfig {
        PartialConfig {
            mode: other.mode.or(self.mode),
            shots: other.shots.or(self.shots),
            sample_count: other.sample_count.or(self.sample_count),
            sample_temperature: other.sample_temperature.or(self.sample_temperature),
            difficulty_threshold: other.difficulty_threshold.or(self.difficulty_threshold),
            interpretation_language: other.interpretation_language.or(self.interpretation_language),
            qe_sentence_scorer: other.qe_sentence_scorer.or(self.qe_sentence_scorer),
            qe_token_scorer: other.qe_token_scorer.or(self.qe_token_scorer),
            qe_reference_scorer: other.qe_reference_scorer.or(self.qe_reference_scorer),
            llm_backend: other.llm_backend.or(self.llm_backend),
            max_output_tokens: other.max_output_tokens.or(self.max_output_tokens),
            max_in_flight: other.max_in_flight.or(self.max_in_flight),
            retry: other.retry.or(self.retry),
        }
    }

    pub fn resolve(self) -> Result<PipelineConfig, ConfigError> {
        let d = PipelineConfig::default();
        let cfg = PipelineConfig {
            mode: self.mode.unwrap_or(d.mode),
            shots: self.shots.unwrap_or(d.shots),
            sample_count: self.sample_count.unwrap_or(d.sample_count),
            sample_temperature: self.sample_temperature.unwrap_or(d.sample_temperature),
            difficulty_threshold: self.difficulty_threshold.unwrap_or(d.difficulty_threshold),
            interpretation_language: self.interpretation_language.unwrap_or(d.interpretation_language),
            qe_sentence_scorer: self.qe_sentence_scorer.unwrap_or(d.qe_sentence_scorer),
            qe_token_scorer: self.qe_token_scorer.unwrap_or(d.qe_token_scorer),
            qe_reference_scorer: self.qe_reference_scorer.unwrap_or(d.qe_reference_scorer),
            llm_backend: self.llm_backend.unwrap_or(d.llm_backend),
            max_output_tokens: self.max_output_tokens.unwrap_or(d.max_output_tokens),
            max_in_flight: self.max_in_flight.unwrap_or(d.max_in_flight),
            retry: self.retry.unwrap_or(d.retry),
        };
        validate_config(cfg)
    }
}

/// Checks a configuration and returns its normalized form. Idempotent.
pub fn validate_config(mut cfg: PipelineConfig) -> Result<PipelineConfig, ConfigError> {
    if cfg.sample_count == 0 {
        return Err(ConfigError::ZeroSamples);
    }
    if !(0.0..=2.0).contains(&cfg.sample_temperature) {
        return Err(ConfigError::Temperature(cfg.sample_temperature));
    }
    cfg.qe_sentence_scorer = cfg.qe_sentence_scorer.trim().to_string();
    cfg.qe_token_scorer = cfg.qe_token_scorer.trim().to_string();
    cfg.qe_reference_scorer = cfg.qe_reference_scorer.trim().to_string();
    cfg.llm_backend = cfg.llm_backend.trim().to_string();
    require_scorer(&cfg.qe_sentence_scorer, ScorerLevel::Sentence)?;
    require_scorer(&cfg.qe_reference_scorer, ScorerLevel::Reference)?;
    let token = require_scorer(&cfg.qe_token_scorer, ScorerLevel::Token)?;
    let (lo, hi) = token.range;
    if !cfg.difficulty_threshold.is_finite() || cfg.difficulty_threshold < lo || cfg.difficulty_threshold > hi {
        return Err(ConfigError::Threshold { tau: cfg.difficulty_threshold, lo, hi });
    }
    if cfg.retry.max_attempts == 0 {
        return Err(ConfigError::Retry);
    }
    if cfg.max_in_flight == 0 {
        return Err(ConfigError::InFlight);
    }
    if cfg.max_output_tokens == 0 {
        return Err(ConfigError::OutputTokens);
    }
    Ok(cfg)
}

fn require_scorer(id: &str, level: ScorerLevel) -> Result<&'static qe::ScorerInfo, ConfigError> {
    qe::scorer_info(id)
        .filter(|info| info.level == level)
        .ok_or_else(|| ConfigError::UnknownScorer { level: level.as_str(), id: id.to_string() })
}

/// Full trace of one source sentence through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub id: String,
    pub pair: LangPair,
    pub input: SentencePair,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub draft: String,
    pub candidates: Vec<DifficultWord>,
    pub selected: Vec<DifficultWord>,
    pub interpretations: Vec<Interpretation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shortfall: Vec<String>,
    pub iqc_trace: Vec<IqcStep>,
    #[serde(rename = "final")]
    pub final_translation: String,
    pub final_qe: QeScore,
}

impl TranslationRecord {
    /// Checks the cross-field invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let candidates: HashSet<&str> = self.candidates.iter().map(|w| w.surface.as_str()).collect();
        if let Some(w) = self.selected.iter().find(|w| !candidates.contains(w.surface.as_str())) {
            return Err(format!("selected word {:?} is not a candidate", w.surface));
        }
        let selected: HashSet<&str> = self.selected.iter().map(|w| w.surface.as_str()).collect();
        if let Some(i) = self.interpretations.iter().find(|i| !selected.contains(i.word.as_str())) {
            return Err(format!("interpretation for {:?} has no selected word", i.word));
        }
        if !self.draft.trim().is_empty() && self.final_translation.trim().is_empty() {
            return Err("empty final translation for non-empty draft".into());
        }
        Ok(())
    }
}
