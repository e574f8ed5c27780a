//! Quality estimation: sentence-level QE, token-level span misalignment, and
//! reference-based scoring, over the sidecar wire protocol or local stubs.
//!
//! Wire protocol (JSON over HTTP):
//! - `POST /v1/score_sentence` `{"src", "cand", "scorer", "ref"?}` → `{"value", "convention"}`
//! - `POST /v1/score_span` `{"host", "counterpart", "span", "direction", "scorer"}` → `{"value"}`
//! - `GET /v1/health` → `{"scorers": [...], "stub_mode": bool}`

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{is_anchored, nfc, RetryPolicy};
use crate::transport::{with_retry, AttemptError};

pub const STUB_SENTENCE: &str = "stub-chrf3";
pub const STUB_TOKEN: &str = "stub-lcs";
pub const STUB_REFERENCE: &str = "stub-ref-chrf3";
pub const LIVE_SENTENCE: &str = "wmt21-comet-qe-da";
pub const LIVE_TOKEN: &str = "comet-span-qe";
pub const LIVE_REFERENCE: &str = "wmt20-comet-da";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    HigherBetter,
    HigherWorse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerLevel {
    Sentence,
    Token,
    Reference,
}

impl ScorerLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerLevel::Sentence => "sentence",
            ScorerLevel::Token => "token",
            ScorerLevel::Reference => "reference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerInfo {
    pub id: &'static str,
    pub level: ScorerLevel,
    pub convention: Convention,
    pub range: (f64, f64),
    pub stub: bool,
}

// Live COMET-family outputs carry no hard bound; their ranges are sanity bounds.
// Token-level scores are clamped to [0, 1] server-side.
static SCORERS: &[ScorerInfo] = &[
    ScorerInfo {
        id: STUB_SENTENCE,
        level: ScorerLevel::Sentence,
        convention: Convention::HigherBetter,
        range: (0.0, 1.0),
        stub: true,
    },
    ScorerInfo {
        id: STUB_TOKEN,
        level: ScorerLevel::Token,
        convention: Convention::HigherWorse,
        range: (0.0, 1.0),
        stub: true,
    },
    ScorerInfo {
        id: STUB_REFERENCE,
        level: ScorerLevel::Reference,
        convention: Convention::HigherBetter,
        range: (0.0, 1.0),
        stub: true,
    },
    ScorerInfo {
        id: LIVE_SENTENCE,
        level: ScorerLevel::Sentence,
        convention: Convention::HigherBetter,
        range: (-2.0, 2.0),
        stub: false,
    },
    ScorerInfo {
        id: LIVE_TOKEN,
        level: ScorerLevel::Token,
        convention: Convention::HigherWorse,
        range: (0.0, 1.0),
        stub: false,
    },
    ScorerInfo {
        id: LIVE_REFERENCE,
        level: ScorerLevel::Reference,
        convention: Convention::HigherBetter,
        range: (-2.0, 2.0),
        stub: false,
    },
];

pub fn scorer_info(id: &str) -> Option<&'static ScorerInfo> {
    SCORERS.iter().find(|s| s.id == id)
}

pub fn scorers() -> &'static [ScorerInfo] {
    SCORERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeScore {
    pub scorer: String,
    pub value: f64,
    pub convention: Convention,
    pub range: (f64, f64),
}

impl QeScore {
    pub fn new(info: &ScorerInfo, value: f64) -> Result<Self, QeError> {
        let (lo, hi) = info.range;
        if !value.is_finite() || value < lo || value > hi {
            return Err(QeError::OutOfRange { scorer: info.id.to_string(), value, lo, hi });
        }
        Ok(QeScore { scorer: info.id.to_string(), value, convention: info.convention, range: info.range })
    }

    /// Orders by quality: `Greater` means `self` is the better score.
    /// Scores from different scorers or conventions are not comparable.
    pub fn quality_cmp(&self, other: &QeScore) -> Result<Ordering, QeError> {
        if self.scorer != other.scorer || self.convention != other.convention {
            return Err(QeError::Incomparable { left: self.scorer.clone(), right: other.scorer.clone() });
        }
        let ord = self.value.partial_cmp(&other.value).unwrap_or(Ordering::Equal);
        Ok(match self.convention {
            Convention::HigherBetter => ord,
            Convention::HigherWorse => ord.reverse(),
        })
    }

    pub fn strictly_better_than(&self, other: &QeScore) -> Result<bool, QeError> {
        Ok(self.quality_cmp(other)? == Ordering::Greater)
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum QeError {
    #[error("QE service unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("QE service rejected request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("QE response schema mismatch ({message}): {body}")]
    Schema { message: String, body: String },
    #[error("scorer {0} is not available")]
    UnknownScorer(String),
    #[error("score {value} from {scorer} outside declared range [{lo}, {hi}]")]
    OutOfRange { scorer: String, value: f64, lo: f64, hi: f64 },
    #[error("comparing scores from different scorers ({left} vs {right})")]
    Incomparable { left: String, right: String },
    #[error("invalid QE request: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanDirection {
    TranslationSpanVsSource,
    SourceSpanVsTranslation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRequest {
    pub src: String,
    pub cand: String,
    pub scorer: String,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResponse {
    pub value: f64,
    pub convention: Convention,
}

/// Token-level request: score `span` (found in `host`) against `counterpart`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRequest {
    pub host: String,
    pub counterpart: String,
    pub span: String,
    pub direction: SpanDirection,
    pub scorer: String,
}

impl SpanRequest {
    pub fn anchored(&self) -> bool {
        is_anchored(&self.host, &self.span)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanResponse {
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub scorers: Vec<String>,
    pub stub_mode: bool,
}

/// Transport behind [`QeClient`]: the local stub, the HTTP sidecar, or a dry-run recorder.
pub trait QeBackend: Send + Sync {
    fn score_sentence(&self, req: &SentenceRequest) -> Result<SentenceResponse, QeError>;
    fn score_span(&self, req: &SpanRequest) -> Result<SpanResponse, QeError>;
    fn health(&self) -> Result<Health, QeError>;
}

/// Deterministic scorers used in stub mode. The formulas are shared with the
/// sidecar's stub mode and must stay bit-identical (see `tests/fixtures/stub_golden.jsonl`).
pub mod stub {
    use std::collections::HashMap;

    use crate::model::nfc;

    fn char_ngrams(text: &str, n: usize) -> HashMap<Vec<char>, usize> {
        let chars: Vec<char> = nfc(text).chars().collect();
        let mut grams = HashMap::new();
        if chars.is_empty() {
            return grams;
        }
        if chars.len() < n {
            *grams.entry(chars).or_insert(0) += 1;
            return grams;
        }
        for w in chars.windows(n) {
            *grams.entry(w.to_vec()).or_insert(0) += 1;
        }
        grams
    }

    /// Character 3-gram F1 between `candidate` and `reference`: `2·m / (|c| + |r|)`
    /// where `m` is the clipped multiset overlap. Strings shorter than three
    /// characters count as a single gram. Range `[0, 1]`.
    pub fn chrf3(candidate: &str, reference: &str) -> f64 {
        let cand = char_ngrams(candidate, 3);
        let refs = char_ngrams(reference, 3);
        let total: usize = cand.values().sum::<usize>() + refs.values().sum::<usize>();
        if total == 0 {
            return 0.0;
        }
        let matched: usize = cand.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
        2.0 * matched as f64 / total as f64
    }

    /// Length in characters of the longest common substring.
    pub fn longest_common_substring(a: &str, b: &str) -> usize {
        let a: Vec<char> = nfc(a).chars().collect();
        let b: Vec<char> = nfc(b).chars().collect();
        let mut prev = vec![0usize; b.len() + 1];
        let mut best = 0;
        for ca in &a {
            let mut cur = vec![0usize; b.len() + 1];
            for (j, cb) in b.iter().enumerate() {
                if ca == cb {
                    cur[j + 1] = prev[j] + 1;
                    best = best.max(cur[j + 1]);
                }
            }
            prev = cur;
        }
        best
    }

    /// `1 − LCS(span, counterpart) / |span|`; 0 for a verbatim copy, 1 for no shared character.
    pub fn span_misalignment(span: &str, counterpart: &str) -> f64 {
        let len = nfc(span).chars().count();
        if len == 0 {
            return 1.0;
        }
        1.0 - longest_common_substring(span, counterpart) as f64 / len as f64
    }
}

/// Local stub backend. Sentence scores compare the candidate against a pinned
/// pseudo-reference for the source (the source itself when none is pinned).
#[derive(Debug, Clone, Default)]
pub struct StubQe {
    pseudo_refs: HashMap<String, String>,
}

impl StubQe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_pseudo_refs(refs: impl IntoIterator<Item = (String, String)>) -> Self {
        StubQe { pseudo_refs: refs.into_iter().map(|(s, r)| (nfc(&s), r)).collect() }
    }

    pub fn pin(&mut self, source: &str, pseudo_ref: &str) {
        self.pseudo_refs.insert(nfc(source), pseudo_ref.to_string());
    }

    pub fn pseudo_reference<'a>(&'a self, source: &'a str) -> &'a str {
        self.pseudo_refs.get(&nfc(source)).map(String::as_str).unwrap_or(source)
    }
}

impl QeBackend for StubQe {
    fn score_sentence(&self, req: &SentenceRequest) -> Result<SentenceResponse, QeError> {
        let value = match req.scorer.as_str() {
            STUB_SENTENCE => stub::chrf3(&req.cand, self.pseudo_reference(&req.src)),
            STUB_REFERENCE => {
                let reference = req
                    .reference
                    .as_deref()
                    .ok_or_else(|| QeError::InvalidInput(format!("{STUB_REFERENCE} needs a ref field")))?;
                stub::chrf3(&req.cand, reference)
            }
            other => return Err(QeError::UnknownScorer(other.to_string())),
        };
        Ok(SentenceResponse { value, convention: Convention::HigherBetter })
    }

    fn score_span(&self, req: &SpanRequest) -> Result<SpanResponse, QeError> {
        if req.scorer != STUB_TOKEN {
            return Err(QeError::UnknownScorer(req.scorer.clone()));
        }
        Ok(SpanResponse { value: stub::span_misalignment(&req.span, &req.counterpart) })
    }

    fn health(&self) -> Result<Health, QeError> {
        let scorers = SCORERS.iter().filter(|s| s.stub).map(|s| s.id.to_string()).collect();
        Ok(Health { scorers, stub_mode: true })
    }
}

/// Client for the QE sidecar.
pub struct HttpQe {
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpQe {
    pub fn new(base_url: &str, retry: RetryPolicy, timeout: Duration) -> Result<Self, QeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| QeError::InvalidInput(e.to_string()))?;
        Ok(HttpQe { base_url: base_url.trim_end_matches('/').to_string(), client, retry })
    }

    fn call<B: Serialize, T: serde::de::DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<T, QeError> {
        let url = format!("{}{}", self.base_url, path);
        let text = with_retry(&self.retry, |_| {
            let req = match body {
                Some(b) => self.client.post(&url).json(b),
                None => self.client.get(&url),
            };
            let resp = req.send().map_err(|e| AttemptError::from_reqwest(&e))?;
            let status = resp.status().as_u16();
            let text = resp.text().map_err(|e| AttemptError::from_reqwest(&e))?;
            if !(200..300).contains(&status) {
                return Err(AttemptError::from_status(status, &text));
            }
            Ok(text)
        })
        .map_err(|e| match e.last.status {
            Some(status) if !e.last.retryable => QeError::Rejected { status, body: e.last.message },
            _ => QeError::Unreachable { attempts: e.attempts, message: e.last.message },
        })?;
        serde_json::from_str(&text).map_err(|e| QeError::Schema { message: e.to_string(), body: text })
    }
}

impl QeBackend for HttpQe {
    fn score_sentence(&self, req: &SentenceRequest) -> Result<SentenceResponse, QeError> {
        self.call("/v1/score_sentence", Some(req))
    }

    fn score_span(&self, req: &SpanRequest) -> Result<SpanResponse, QeError> {
        self.call("/v1/score_span", Some(req))
    }

    fn health(&self) -> Result<Health, QeError> {
        self.call::<(), _>("/v1/health", None)
    }
}

/// Records wire bodies instead of sending them; every score is the scorer range midpoint.
#[derive(Debug, Default)]
pub struct DryRunQe {
    requests: Mutex<Vec<serde_json::Value>>,
}

impl DryRunQe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn take_requests(&self) -> Vec<serde_json::Value> {
        std::mem::take(&mut *self.requests.lock().expect("dry-run log poisoned"))
    }

    fn record(&self, path: &str, body: serde_json::Value) {
        self.requests.lock().expect("dry-run log poisoned").push(serde_json::json!({"endpoint": path, "body": body}));
    }

    fn midpoint(scorer: &str) -> Result<f64, QeError> {
        let info = scorer_info(scorer).ok_or_else(|| QeError::UnknownScorer(scorer.to_string()))?;
        Ok((info.range.0 + info.range.1) / 2.0)
    }
}

impl QeBackend for DryRunQe {
    fn score_sentence(&self, req: &SentenceRequest) -> Result<SentenceResponse, QeError> {
        self.record("/v1/score_sentence", serde_json::to_value(req).unwrap_or_default());
        Ok(SentenceResponse { value: Self::midpoint(&req.scorer)?, convention: Convention::HigherBetter })
    }

    fn score_span(&self, req: &SpanRequest) -> Result<SpanResponse, QeError> {
        self.record("/v1/score_span", serde_json::to_value(req).unwrap_or_default());
        Ok(SpanResponse { value: Self::midpoint(&req.scorer)? })
    }

    fn health(&self) -> Result<Health, QeError> {
        Ok(Health { scorers: SCORERS.iter().map(|s| s.id.to_string()).collect(), stub_mode: false })
    }
}

/// Typed QE access bound to one sentence, one token and one reference scorer.
#[derive(Clone)]
pub struct QeClient {
    backend: Arc<dyn QeBackend>,
    sentence: &'static ScorerInfo,
    token: &'static ScorerInfo,
    reference: &'static ScorerInfo,
}

impl fmt::Debug for QeClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QeClient")
            .field("sentence", &self.sentence.id)
            .field("token", &self.token.id)
            .field("reference", &self.reference.id)
            .finish()
    }
}

fn lookup(id: &str, level: ScorerLevel) -> Result<&'static ScorerInfo, QeError> {
    scorer_info(id).filter(|s| s.level == level).ok_or_else(|| QeError::UnknownScorer(id.to_string()))
}

impl QeClient {
    pub fn new(backend: Arc<dyn QeBackend>, sentence: &str, token: &str, reference: &str) -> Result<Self, QeError> {
        Ok(QeClient {
            backend,
            sentence: lookup(sentence, ScorerLevel::Sentence)?,
            token: lookup(token, ScorerLevel::Token)?,
            reference: lookup(reference, ScorerLevel::Reference)?,
        })
    }

    /// Client over the local stub with the default stub scorer ids.
    pub fn stub(stub: StubQe) -> Self {
        Self::new(Arc::new(stub), STUB_SENTENCE, STUB_TOKEN, STUB_REFERENCE).expect("stub ids are registered")
    }

    pub fn sentence_scorer(&self) -> &'static ScorerInfo {
        self.sentence
    }

    pub fn token_scorer(&self) -> &'static ScorerInfo {
        self.token
    }

    pub fn health(&self) -> Result<Health, QeError> {
        self.backend.health()
    }

    fn sentence_request(&self, info: &'static ScorerInfo, req: SentenceRequest) -> Result<QeScore, QeError> {
        if req.src.trim().is_empty() {
            return Err(QeError::InvalidInput("empty source sentence".into()));
        }
        let resp = self.backend.score_sentence(&req)?;
        if resp.convention != info.convention {
            return Err(QeError::Schema {
                message: format!("expected {:?} convention from {}", info.convention, info.id),
                body: serde_json::to_string(&resp).unwrap_or_default(),
            });
        }
        QeScore::new(info, resp.value)
    }

    /// Reference-free quality ψ(candidate | source), higher is better.
    pub fn score_sentence(&self, source: &str, candidate: &str) -> Result<QeScore, QeError> {
        let req = SentenceRequest {
            src: source.to_string(),
            cand: candidate.to_string(),
            scorer: self.sentence.id.to_string(),
            reference: None,
        };
        self.sentence_request(self.sentence, req)
    }

    /// Reference-based quality of `candidate` against `reference`.
    pub fn score_with_reference(&self, source: &str, candidate: &str, reference: &str) -> Result<QeScore, QeError> {
        let req = SentenceRequest {
            src: source.to_string(),
            cand: candidate.to_string(),
            scorer: self.reference.id.to_string(),
            reference: Some(reference.to_string()),
        };
        self.sentence_request(self.reference, req)
    }

    /// Misalignment φ(span | source, draft) of a source span against the draft, in `[0, 1]`, higher is worse.
    pub fn score_source_span(&self, source: &str, draft: &str, span: &str) -> Result<QeScore, QeError> {
        if span.trim().is_empty() {
            return Err(QeError::InvalidInput("empty span".into()));
        }
        let req = SpanRequest {
            host: source.to_string(),
            counterpart: draft.to_string(),
            span: span.to_string(),
            direction: SpanDirection::SourceSpanVsTranslation,
            scorer: self.token.id.to_string(),
        };
        if !req.anchored() {
            log::debug!("span {span:?} is not anchored in the source; sidecar best-match applies");
        }
        let resp = self.backend.score_span(&req)?;
        QeScore::new(self.token, resp.value)
    }

    /// Index and score of the best candidate under ψ; ties go to the lowest index.
    pub fn rerank_best(&self, source: &str, candidates: &[String]) -> Result<(usize, QeScore), QeError> {
        let mut best: Option<(usize, QeScore)> = None;
        for (i, cand) in candidates.iter().enumerate() {
            let score = self.score_sentence(source, cand)?;
            let better = match &best {
                None => true,
                Some((_, incumbent)) => score.strictly_better_than(incumbent)?,
            };
            if better {
                best = Some((i, score));
            }
        }
        best.ok_or_else(|| QeError::InvalidInput("no candidates to rerank".into()))
    }

    /// Ids reported by the backend that this client needs but are missing.
    pub fn missing_scorers(&self) -> Result<Vec<&'static str>, QeError> {
        let health = self.backend.health()?;
        let have: HashSet<&str> = health.scorers.iter().map(String::as_str).collect();
        Ok([self.sentence.id, self.token.id, self.reference.id].into_iter().filter(|id| !have.contains(id)).collect())
    }
}

/// Sentence-level objective maximized by interpretation quality control.
pub trait SentenceObjective {
    fn score(&self, source: &str, candidate: &str) -> Result<QeScore, QeError>;
}

/// Reference-free QE objective.
pub struct QeObjective<'a>(pub &'a QeClient);

impl SentenceObjective for QeObjective<'_> {
    fn score(&self, source: &str, candidate: &str) -> Result<QeScore, QeError> {
        self.0.score_sentence(source, candidate)
    }
}

/// Reference-based objective, used when a reference translation is available.
pub struct ReferenceObjective<'a> {
    pub client: &'a QeClient,
    pub reference: &'a str,
}

impl SentenceObjective for ReferenceObjective<'_> {
    fn score(&self, source: &str, candidate: &str) -> Result<QeScore, QeError> {
        self.client.score_with_reference(source, candidate, self.reference)
    }
}
