#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use duat_core::llm::{LlmBackend, LlmGateway};
use duat_core::model::{DemonstrationSets, Interpretation, LangPair, RetryPolicy};
use duat_core::prompt::{self, Query};

pub fn pair() -> LangPair {
    LangPair::new("en", "de").unwrap()
}

pub fn zero_shot() -> DemonstrationSets {
    DemonstrationSets::zero_shot()
}

pub fn gateway(backend: impl LlmBackend + 'static) -> LlmGateway {
    LlmGateway::new(Arc::new(backend), RetryPolicy::no_delay(1), 4)
}

pub fn igt_prompt(source: &str, draft: &str, set: &[&Interpretation]) -> String {
    let glosses: Vec<(String, String)> = set.iter().map(|i| (i.word.clone(), i.gloss.clone())).collect();
    prompt::render(&pair(), &zero_shot(), &Query::IgtRefine { source, draft, glosses: &glosses }).unwrap()
}

/// Character 3-gram F1, written independently of the library: strings shorter than
/// three characters are one gram, empty strings have none.
pub fn oracle_chrf3(cand: &str, reference: &str) -> f64 {
    fn grams(s: &str) -> BTreeMap<String, usize> {
        let chars: Vec<char> = s.chars().collect();
        let mut m = BTreeMap::new();
        if chars.is_empty() {
            return m;
        }
        if chars.len() < 3 {
            m.insert(s.to_string(), 1);
            return m;
        }
        for i in 0..=chars.len() - 3 {
            *m.entry(chars[i..i + 3].iter().collect::<String>()).or_insert(0) += 1;
        }
        m
    }
    let (c, r) = (grams(cand), grams(reference));
    let total: usize = c.values().sum::<usize>() + r.values().sum::<usize>();
    if total == 0 {
        return 0.0;
    }
    let matched: usize = c.iter().map(|(g, n)| *n.min(r.get(g).unwrap_or(&0))).sum();
    2.0 * matched as f64 / total as f64
}

/// Brute-force longest common substring length in characters.
pub fn oracle_lcs(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut best = 0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut k = 0;
            while i + k < a.len() && j + k < b.len() && a[i + k] == b[j + k] {
                k += 1;
            }
            best = best.max(k);
        }
    }
    best
}
