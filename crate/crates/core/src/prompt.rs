//! Prompt rendering for the five request shapes, and lenient parsers for the replies.
//!
//! Request wording lives in `resources/prompts.txt`, one `## <kind>` section per
//! prompt kind. Placeholders `[L_s]`, `[L_t]` and `[L_i]` (interpretation language)
//! are substituted with display names. A rendered prompt is the request header,
//! then `N` demonstration blocks, then exactly one query block, separated by blank lines.

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{nfc, DemonstrationSets, LangPair};

pub const TEMPLATE_RESOURCE: &str = include_str!("../resources/prompts.txt");

/// sha256 of the prompt wording, recorded in run manifests.
pub fn template_digest() -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(TEMPLATE_RESOURCE.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Mt,
    DiffDetect,
    Interp,
    IgtRefine,
    DemoSynth,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] =
        [PromptKind::Mt, PromptKind::DiffDetect, PromptKind::Interp, PromptKind::IgtRefine, PromptKind::DemoSynth];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Mt => "mt",
            PromptKind::DiffDetect => "diff_detect",
            PromptKind::Interp => "interp",
            PromptKind::IgtRefine => "igt_refine",
            PromptKind::DemoSynth => "demo_synth",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("insufficient demonstrations for {kind}: need {needed}, have {available}")]
    InsufficientDemos { kind: PromptKind, needed: usize, available: usize },
    #[error("template resource has no section for {0}")]
    MissingTemplate(PromptKind),
    #[error("unsubstituted placeholder in {0} header")]
    Placeholder(PromptKind),
}

/// Request header for one prompt kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub header: String,
}

impl PromptTemplate {
    pub fn for_kind(kind: PromptKind) -> Result<&'static PromptTemplate, PromptError> {
        templates().iter().find(|t| t.kind == kind).ok_or(PromptError::MissingTemplate(kind))
    }

    fn header_for(&self, pair: &LangPair, interp_language: Option<&str>) -> Result<String, PromptError> {
        let text = self
            .header
            .replace("[L_s]", &pair.src_name)
            .replace("[L_t]", &pair.tgt_name)
            .replace("[L_i]", interp_language.unwrap_or(&pair.tgt_name));
        if text.contains("[L_") {
            return Err(PromptError::Placeholder(self.kind));
        }
        Ok(text)
    }
}

fn templates() -> &'static [PromptTemplate] {
    static TEMPLATES: OnceLock<Vec<PromptTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| parse_templates(TEMPLATE_RESOURCE))
}

fn parse_templates(resource: &str) -> Vec<PromptTemplate> {
    let mut out: Vec<PromptTemplate> = Vec::new();
    for line in resource.lines() {
        if let Some(name) = line.strip_prefix("## ") {
            if let Some(kind) = PromptKind::ALL.iter().find(|k| k.as_str() == name.trim()) {
                out.push(PromptTemplate { kind: *kind, header: String::new() });
                continue;
            }
        }
        if let Some(current) = out.last_mut() {
            if !current.header.is_empty() {
                current.header.push('\n');
            }
            current.header.push_str(line);
        }
    }
    for t in &mut out {
        t.header = t.header.trim().to_string();
    }
    out
}

/// Kind-specific query inputs.
#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    Mt {
        source: &'a str,
    },
    DiffDetect {
        source: &'a str,
        draft: &'a str,
    },
    /// `language` is the display name of the interpretation language.
    Interp {
        source: &'a str,
        words: &'a [String],
        language: &'a str,
    },
    IgtRefine {
        source: &'a str,
        draft: &'a str,
        glosses: &'a [(String, String)],
    },
    DemoSynth {
        source: &'a str,
        reference: &'a str,
    },
}

impl Query<'_> {
    pub fn kind(&self) -> PromptKind {
        match self {
            Query::Mt { .. } => PromptKind::Mt,
            Query::DiffDetect { .. } => PromptKind::DiffDetect,
            Query::Interp { .. } => PromptKind::Interp,
            Query::IgtRefine { .. } => PromptKind::IgtRefine,
            Query::DemoSynth { .. } => PromptKind::DemoSynth,
        }
    }
}

pub const NO_WORDS: &str = "None";

fn word_list(words: &[String]) -> String {
    words.iter().map(|w| format!("- {w}")).collect::<Vec<_>>().join("\n")
}

fn gloss_lines(glosses: &[(String, String)]) -> String {
    glosses.iter().map(|(w, g)| format!("{w}: {g}")).collect::<Vec<_>>().join("\n")
}

/// Section body that may be empty; an empty body leaves only the label line.
fn section(label: &str, body: &str) -> String {
    if body.is_empty() {
        label.to_string()
    } else {
        format!("{label}\n{body}")
    }
}

fn demo_blocks(kind: PromptKind, demos: &DemonstrationSets) -> Result<Vec<String>, PromptError> {
    let n = demos.shots;
    let available = match kind {
        PromptKind::Mt => demos.mt.len(),
        PromptKind::DiffDetect => demos.diff.len(),
        PromptKind::Interp => demos.intp.len(),
        PromptKind::IgtRefine => demos.igt.len(),
        PromptKind::DemoSynth => return Ok(Vec::new()),
    };
    if available < n {
        return Err(PromptError::InsufficientDemos { kind, needed: n, available });
    }
    let blocks = match kind {
        PromptKind::Mt => demos.mt[..n]
            .iter()
            .map(|d| format!("Source Sentence: {}\nTranslation: {}", d.source, d.translation))
            .collect(),
        PromptKind::DiffDetect => demos.diff[..n]
            .iter()
            .map(|d| {
                let words = if d.words.is_empty() { NO_WORDS.to_string() } else { word_list(&d.words) };
                format!("Source Sentence: {}\nDraft Translation: {}\nDifficult Words:\n{}", d.source, d.draft, words)
            })
            .collect(),
        PromptKind::Interp => demos.intp[..n]
            .iter()
            .map(|d| {
                format!(
                    "Source Sentence: {}\n{}\n{}",
                    d.source,
                    section("Difficult Words:", &word_list(&d.words)),
                    section("Interpretations:", &gloss_lines(&d.glosses))
                )
            })
            .collect(),
        PromptKind::IgtRefine => demos.igt[..n]
            .iter()
            .map(|d| {
                format!(
                    "Source Sentence: {}\nDraft Translation: {}\n{}\nRevised Translation: {}",
                    d.source,
                    d.draft,
                    section("Interpretations of Difficult Words:", &gloss_lines(&d.glosses)),
                    d.refined
                )
            })
            .collect(),
        PromptKind::DemoSynth => unreachable!(),
    };
    Ok(blocks)
}

fn query_block(query: &Query<'_>) -> String {
    match *query {
        Query::Mt { source } => format!("Source Sentence: {source}\nTranslation:"),
        Query::DiffDetect { source, draft } => {
            format!("Source Sentence: {source}\nDraft Translation: {draft}\nDifficult Words:")
        }
        Query::Interp { source, words, .. } => {
            format!("Source Sentence: {source}\n{}\nInterpretations:", section("Difficult Words:", &word_list(words)))
        }
        Query::IgtRefine { source, draft, glosses } => format!(
            "Source Sentence: {source}\nDraft Translation: {draft}\n{}\nRevised Translation:",
            section("Interpretations of Difficult Words:", &gloss_lines(glosses))
        ),
        Query::DemoSynth { source, reference } => {
            format!("Source Sentence: {source}\nTarget Translation: {reference}\nDifficult Words and Interpretations:")
        }
    }
}

/// Renders the prompt for `query` using the first `demos.shots` exemplars of the matching slot.
pub fn render(pair: &LangPair, demos: &DemonstrationSets, query: &Query<'_>) -> Result<String, PromptError> {
    let kind = query.kind();
    let template = PromptTemplate::for_kind(kind)?;
    let interp_language = match query {
        Query::Interp { language, .. } => Some(*language),
        _ => None,
    };
    let mut parts = vec![template.header_for(pair, interp_language)?];
    parts.extend(demo_blocks(kind, demos)?);
    parts.push(query_block(query));
    Ok(parts.join("\n\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    Interpretations,
    DemoSynthesis,
}

/// A reply the parser could not map onto the expected structure. Carries the raw text for audit.
#[derive(Debug, Clone, thiserror::Error, PartialEq, Serialize, Deserialize)]
#[error("{}", match .kind {
    ParseErrorKind::Interpretations => "unparseable interpretations",
    ParseErrorKind::DemoSynthesis => "unparseable demo synthesis",
})]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub raw: String,
}

const QUOTES: &[char] = &['"', '\'', '`', '“', '”', '‘', '’', '「', '」', '『', '』', '«', '»', '《', '》'];
const TRAILING: &[char] = &[',', ';', '，', '；', '、'];
const REFUSALS: &[&str] = &["none", "n/a", "na", "nothing", "null", "no", "无", "没有", "-"];

/// Strips a leading bullet or enumeration marker (`- `, `* `, `1.`, `2)`, `(3)`, `4、`).
fn strip_marker(s: &str) -> &str {
    let mut s = s.trim_start();
    loop {
        let before = s;
        if let Some(rest) = s.strip_prefix(['-', '*', '•', '·', '+', '●', '▪']) {
            // a lone "**bold**" opener is not a bullet
            if !rest.starts_with('*') {
                s = rest.trim_start();
            }
        }
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(after) = rest.strip_prefix(['.', ')', '、', '．', '）']) {
                if !after.starts_with(|c: char| c.is_ascii_digit()) {
                    s = after.trim_start();
                }
            }
        }
        if let Some(rest) = s.strip_prefix(['(', '（']) {
            let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits > 0 {
                if let Some(after) = rest[digits..].strip_prefix([')', '）']) {
                    s = after.trim_start();
                }
            }
        }
        if s == before {
            return s;
        }
    }
}

fn strip_decoration(s: &str) -> &str {
    let mut s = s.trim();
    loop {
        let before = s;
        s = s.trim_matches('*').trim();
        s = s.trim_matches(QUOTES).trim();
        if s == before {
            return s;
        }
    }
}

fn clean_item(s: &str) -> String {
    let s = strip_marker(s);
    let s = strip_decoration(s).trim_end_matches(TRAILING);
    nfc(strip_decoration(s))
}

fn is_refusal(item: &str) -> bool {
    let lower = item.to_lowercase();
    let lower = lower.trim_end_matches(['.', '。', '!']).trim();
    REFUSALS.contains(&lower)
        || lower.starts_with("no mistranslated")
        || lower.starts_with("no difficult")
        || lower.starts_with("there are no")
        || lower.starts_with("there is no")
}

fn strip_label<'a>(item: &'a str, labels: &[&str]) -> &'a str {
    for label in labels {
        if item.len() >= label.len() && item.is_char_boundary(label.len()) {
            let (head, rest) = item.split_at(label.len());
            if head.eq_ignore_ascii_case(label) {
                return rest.trim_start_matches([':', '：']).trim();
            }
        }
    }
    item
}

fn dedup_first(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|i| seen.insert(i.clone())).collect()
}

/// Extracts difficult-word surfaces from a detection reply. Refusals and empty replies yield `[]`.
pub fn parse_difficult_words(raw: &str) -> Vec<String> {
    const LABELS: &[&str] = &["difficult words", "mistranslated words and phrases", "mistranslated words"];
    let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let pieces: Vec<&str> =
        if lines.len() == 1 { lines[0].split([',', '，', '、', ';', '；']).collect() } else { lines };
    let items = pieces
        .into_iter()
        .map(|p| clean_item(strip_label(strip_marker(p), LABELS)))
        .filter(|i| !i.is_empty() && !is_refusal(i));
    dedup_first(items)
}

/// Glosses recovered from an interpretation reply, in the order of the expected words.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParsedInterpretations {
    pub glosses: Vec<(String, String)>,
    pub shortfall: Vec<String>,
}

const SEPARATORS: &[&str] = &["::", "：", ":", " - ", " – ", " — ", " = "];

fn split_entry(line: &str) -> Option<(&str, &str)> {
    let mut best: Option<(usize, &str)> = None;
    for sep in SEPARATORS {
        if let Some(pos) = line.find(sep) {
            // "::" wins over ":" at the same position since it is listed first
            if best.is_none_or(|(b, _)| pos < b) {
                best = Some((pos, sep));
            }
        }
    }
    best.map(|(pos, sep)| (&line[..pos], &line[pos + sep.len()..]))
}

fn clean_gloss(s: &str) -> String {
    strip_decoration(strip_marker(strip_decoration(s))).to_string()
}

/// Maps each expected word to its gloss. Words absent from the reply land in `shortfall`.
pub fn parse_interpretations(raw: &str, expected: &[String]) -> Result<ParsedInterpretations, ParseError> {
    let unparseable = || ParseError { kind: ParseErrorKind::Interpretations, raw: raw.to_string() };
    let mut entries: Vec<(String, String)> = Vec::new();
    for line in raw.lines() {
        let line = strip_marker(line.trim());
        let Some((key, gloss)) = split_entry(line) else { continue };
        let key = clean_item(key);
        let gloss = clean_gloss(gloss);
        if key.is_empty() || gloss.is_empty() || entries.iter().any(|(k, _)| *k == key) {
            continue;
        }
        entries.push((key, gloss));
    }
    if entries.is_empty() {
        return Err(unparseable());
    }
    let mut out = ParsedInterpretations::default();
    for word in expected {
        let target = nfc(word.trim());
        let hit = entries
            .iter()
            .find(|(k, _)| *k == target)
            .or_else(|| entries.iter().find(|(k, _)| k.to_lowercase() == target.to_lowercase()));
        match hit {
            Some((_, gloss)) if !out.glosses.iter().any(|(w, _)| *w == *word) => {
                out.glosses.push((word.clone(), gloss.clone()))
            }
            Some(_) => {}
            None => out.shortfall.push(word.clone()),
        }
    }
    Ok(out)
}

fn demo_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*•]\s+|\d+[.)]\s*)?(?:\*\*)?(?:<<)?\s*(.+?)\s*(?:>>)?(?:\*\*)?\s*::\s*(?:<<)?\s*(.*?)\s*(?:>>)?\s*$")
            .expect("static regex")
    })
}

/// Words and their surviving glosses from a demo synthesis reply.
pub type DemoSynthesis = (Vec<String>, Vec<(String, String)>);

/// Parses `<<word>> :: <<gloss>>` lines. Duplicate words keep their first gloss.
/// A bare refusal ("None") is an empty result rather than an error.
pub fn parse_demo_synthesis(raw: &str) -> Result<DemoSynthesis, ParseError> {
    let re = demo_line_regex();
    let mut words = Vec::new();
    let mut glosses = Vec::new();
    let mut recognized = false;
    for line in raw.lines() {
        let Some(caps) = re.captures(line) else { continue };
        let word = nfc(strip_decoration(&caps[1]));
        let gloss = strip_decoration(&caps[2]).to_string();
        if word.is_empty() || gloss.is_empty() {
            continue;
        }
        recognized = true;
        if words.contains(&word) {
            continue;
        }
        words.push(word.clone());
        glosses.push((word, gloss));
    }
    if !recognized {
        let whole = clean_item(raw.trim());
        if !whole.is_empty() && !whole.contains('\n') && is_refusal(&whole) {
            return Ok((words, glosses));
        }
        return Err(ParseError { kind: ParseErrorKind::DemoSynthesis, raw: raw.to_string() });
    }
    Ok((words, glosses))
}
