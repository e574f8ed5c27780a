use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use duat_core::bench::{self, corpus_stats, load_scores, SystemScores};
use duat_core::demos::{self, SynthesisOptions, SynthesizedDemo};
use duat_core::llm::write_playbook;
use duat_core::model::{Mode, PipelineConfig, SentencePair, TranslationRecord};
use duat_core::pipeline::{run_ordered, Ablation, SentenceFailure};
use duat_core::prompt::{self, PromptKind};
use serde::Serialize;

use crate::args::{BenchArgs, RunArgs, DEFAULT_SEED, DEFAULT_TAU_GRID};
use crate::setup::{self, Env};

/// Outcome of a command that got past configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Partial,
}

/// JSONL writer that flushes after every line, so any prefix of the file is valid.
pub struct JsonlSink {
    out: Box<dyn Write>,
}

impl JsonlSink {
    pub fn open(path: Option<&Path>) -> anyhow::Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
            None => Box::new(io::stdout()),
        };
        Ok(JsonlSink { out })
    }

    pub fn emit<T: Serialize>(&mut self, value: &T) -> io::Result<()> {
        let mut line = serde_json::to_string(value).map_err(io::Error::other)?;
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        self.out.flush()
    }
}

#[derive(Debug, Default, Serialize)]
pub struct Counts {
    pub total: usize,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub args: RunArgs,
    pub config: PipelineConfig,
    pub ablation: Ablation,
    pub llm_backend: String,
    pub qe_scorers: BTreeMap<&'static str, String>,
    pub prompt_template_sha256: String,
    pub started_at_unix: u64,
    pub elapsed_ms: u64,
    pub counts: Counts,
    pub failed: Vec<SentenceFailure>,
    pub llm_attempts: BTreeMap<PromptKind, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<serde_json::Value>,
}

struct Clock {
    started: Instant,
    unix: u64,
}

impl Clock {
    fn start() -> Self {
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Clock { started: Instant::now(), unix }
    }
}

fn manifest(command: &str, env: &Env, clock: &Clock, counts: Counts, failed: Vec<SentenceFailure>) -> RunManifest {
    let p = &env.pipeline;
    RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        args: env.args.clone(),
        config: p.config.clone(),
        ablation: p.ablation,
        llm_backend: p.gateway.backend_id().to_string(),
        qe_scorers: BTreeMap::from([
            ("sentence", p.config.qe_sentence_scorer.clone()),
            ("token", p.config.qe_token_scorer.clone()),
            ("reference", p.config.qe_reference_scorer.clone()),
        ]),
        prompt_template_sha256: prompt::template_digest(),
        started_at_unix: clock.unix,
        elapsed_ms: clock.started.elapsed().as_millis() as u64,
        counts,
        failed,
        llm_attempts: PromptKind::ALL.iter().map(|&k| (k, p.gateway.attempts_for(k))).collect(),
        report: None,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Side outputs shared by the translation commands: dry-run requests, the recorded
/// playbook and the manifest.
fn finish(env: &Env, manifest: &RunManifest) -> anyhow::Result<Status> {
    if env.args.dry_run {
        // the output file receives the wire requests instead of records
        let mut sink = JsonlSink::open(env.args.out.as_deref())?;
        for req in env.dry_llm.as_ref().map(|d| d.take_requests()).unwrap_or_default() {
            sink.emit(&serde_json::json!({"target": "llm", "request": req}))?;
        }
        for req in env.dry_qe.as_ref().map(|d| d.take_requests()).unwrap_or_default() {
            sink.emit(&serde_json::json!({"target": "qe", "request": req}))?;
        }
    }
    if let Some(path) = &env.args.record_playbook {
        let entries = env.recorder.as_ref().map(|r| r.entries()).unwrap_or_default();
        write_playbook(path, &entries).with_context(|| format!("writing playbook {}", path.display()))?;
    }
    if let Some(path) = env.args.manifest_path() {
        write_json(&path, manifest)?;
    }
    for f in &manifest.failed {
        log::error!("{f}");
    }
    Ok(if manifest.failed.is_empty() { Status::Ok } else { Status::Partial })
}

/// Runs `work` per sentence, streaming each item of its output in input order.
fn stream<T: Serialize + Send>(
    env: &Env,
    corpus: &[SentencePair],
    work: impl Fn(&SentencePair) -> Result<Vec<T>, SentenceFailure> + Sync,
    mut observe: impl FnMut(&T),
) -> anyhow::Result<(Counts, Vec<SentenceFailure>)> {
    let mut sink = if env.args.dry_run { None } else { Some(JsonlSink::open(env.args.out.as_deref())?) };
    let mut counts = Counts { total: corpus.len(), ..Default::default() };
    let mut failed = Vec::new();
    let mut io_error = None;
    run_ordered(corpus, env.args.jobs(), work, |_, result| match result {
        Ok(items) => {
            counts.ok += 1;
            for item in &items {
                observe(item);
                if let (Some(sink), None) = (sink.as_mut(), &io_error) {
                    if let Err(e) = sink.emit(item) {
                        io_error = Some(e);
                    }
                }
            }
        }
        Err(f) => {
            counts.failed += 1;
            failed.push(f);
        }
    });
    if let Some(e) = io_error {
        return Err(e).context("writing output");
    }
    Ok((counts, failed))
}

pub fn translate(args: RunArgs, ablation: Ablation, command: &str) -> anyhow::Result<Status> {
    let clock = Clock::start();
    let mut env = setup::env(args, false)?;
    env.pipeline.ablation = ablation;
    let corpus = setup::corpus(&env.args)?;
    let p = &env.pipeline;
    let (counts, failed) = stream(&env, &corpus, |s| p.translate(s).map(|r| vec![r]), |_| {})?;
    finish(&env, &manifest(command, &env, &clock, counts, failed))
}

#[derive(Debug, Default, Serialize)]
struct TauSummary {
    tau: f64,
    sentences: usize,
    selected_words: usize,
    mean_selected: f64,
    mean_final_qe: f64,
}

pub fn sweep_tau(args: RunArgs, grid: Vec<f64>) -> anyhow::Result<Status> {
    let clock = Clock::start();
    let env = setup::env(args, false)?;
    if env.pipeline.config.mode != Mode::DuatE {
        bail!("sweep-tau needs --mode duat-e");
    }
    let grid = if grid.is_empty() { DEFAULT_TAU_GRID.to_vec() } else { grid };
    let range = env.pipeline.qe.token_scorer().range;
    if let Some(t) = grid.iter().find(|t| !(range.0..=range.1).contains(*t)) {
        bail!("τ {t} is outside the token scorer range [{}, {}]", range.0, range.1);
    }
    let corpus = setup::corpus(&env.args)?;
    let p = &env.pipeline;
    let mut summary: Vec<TauSummary> = grid.iter().map(|&tau| TauSummary { tau, ..Default::default() }).collect();
    let (counts, failed) = stream(
        &env,
        &corpus,
        |s| p.sweep(s, &grid),
        |r: &TranslationRecord| {
            if let Some(entry) = summary.iter_mut().find(|e| Some(e.tau) == r.tau) {
                entry.sentences += 1;
                entry.selected_words += r.selected.len();
                entry.mean_final_qe += r.final_qe.value;
            }
        },
    )?;
    for e in &mut summary {
        if e.sentences > 0 {
            e.mean_selected = e.selected_words as f64 / e.sentences as f64;
            e.mean_final_qe /= e.sentences as f64;
        }
        eprintln!(
            "tau={:.2} sentences={} selected={} mean_selected={:.3} mean_final_qe={:.4}",
            e.tau, e.sentences, e.selected_words, e.mean_selected, e.mean_final_qe
        );
    }
    let mut m = manifest("sweep-tau", &env, &clock, counts, failed);
    m.report = Some(serde_json::json!({ "grid": grid, "summary": summary }));
    finish(&env, &m)
}

pub fn synth_demos(
    args: RunArgs,
    max_pairs: Option<usize>,
    min_reference_qe: Option<f64>,
    sets_out: Option<PathBuf>,
) -> anyhow::Result<Status> {
    let clock = Clock::start();
    let env = setup::env(args, true)?;
    let mut corpus = setup::corpus(&env.args)?;
    if let Some(n) = max_pairs {
        corpus.truncate(n);
    }
    let p = &env.pipeline;
    let options = SynthesisOptions { max_pairs: None, min_reference_qe };
    let mut synthesized = Vec::new();
    let (counts, skipped) = stream(
        &env,
        &corpus,
        |s| {
            let one = demos::synthesize(std::slice::from_ref(s), &p.pair, &p.demos, &p.gateway, &p.qe, &options);
            match one.skipped.into_iter().next() {
                Some(skip) => Err(SentenceFailure { id: skip.id, stage: "synthesize".into(), message: skip.reason }),
                None => Ok(one.demos),
            }
        },
        |d: &SynthesizedDemo| synthesized.push(d.clone()),
    )?;
    // skipped pairs are expected and do not make the run partial
    let mut report = serde_json::json!({
        "demos": synthesized.len(),
        "mt_only": synthesized.iter().filter(|d| d.mt_only).count(),
        "skipped": skipped,
    });
    let mut failed = Vec::new();
    if let Some(path) = sets_out {
        match demos::assemble_sets(&synthesized, p.config.shots, env.args.seed()) {
            Ok(sets) if !env.args.dry_run => write_json(&path, &sets)?,
            Ok(_) => {}
            Err(e) => {
                report["assemble_error"] = serde_json::json!(e.to_string());
                failed.push(SentenceFailure { id: "*".into(), stage: "assemble".into(), message: e.to_string() });
            }
        }
    }
    let mut m = manifest("synth-demos", &env, &clock, counts, failed);
    m.report = Some(report);
    finish(&env, &m)
}

#[derive(Debug, Serialize)]
struct RerankRecord {
    id: String,
    src: String,
    best_run: usize,
    run: PathBuf,
    translation: String,
    score: duat_core::qe::QeScore,
    candidates: usize,
}

/// Reads `id`, `input.src` and `final` from translation records.
fn read_run(path: &Path) -> anyhow::Result<Vec<(String, String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        let field = |ptr: &str| {
            v.pointer(ptr)
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .with_context(|| format!("{} line {}: missing {ptr}", path.display(), i + 1))
        };
        out.push((field("/id")?, field("/input/src")?, field("/final")?));
    }
    Ok(out)
}

/// QE best-of-N over the final translations of several runs, per sentence id.
pub fn rerank(args: RunArgs, runs: Vec<PathBuf>) -> anyhow::Result<Status> {
    let clock = Clock::start();
    let env = setup::env_qe_only(args)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, (String, Vec<(usize, String)>)> = BTreeMap::new();
    for (r, path) in runs.iter().enumerate() {
        for (id, src, translation) in read_run(path)? {
            let entry = by_id.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                (src, Vec::new())
            });
            entry.1.push((r, translation));
        }
    }
    let items: Vec<SentencePair> =
        order.iter().map(|id| SentencePair::new(id.clone(), by_id[id].0.clone(), None)).collect();
    let qe = &env.pipeline.qe;
    let (counts, failed) = stream(
        &env,
        &items,
        |s| {
            let cands = &by_id[&s.id].1;
            let texts: Vec<String> = cands.iter().map(|(_, t)| t.clone()).collect();
            let (best, score) = qe.rerank_best(&s.src, &texts).map_err(|e| SentenceFailure {
                id: s.id.clone(),
                stage: "rerank".into(),
                message: e.to_string(),
            })?;
            let run = cands[best].0;
            Ok(vec![RerankRecord {
                id: s.id.clone(),
                src: s.src.clone(),
                best_run: run,
                run: runs[run].clone(),
                translation: texts[best].clone(),
                score,
                candidates: texts.len(),
            }])
        },
        |_| {},
    )?;
    finish(&env, &manifest("rerank", &env, &clock, counts, failed))
}

pub fn build_bench(args: BenchArgs) -> anyhow::Result<Status> {
    let corpus = setup::read_corpus(&args.corpus)?;
    let explicit: BTreeMap<&str, &str> = args.rho.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    if let Some(unknown) = explicit.keys().find(|k| !args.scores.iter().any(|(s, _)| s == *k)) {
        bail!("--rho names system {unknown} that has no --scores");
    }
    let mut systems = Vec::new();
    for (name, path) in &args.scores {
        let rho = match explicit.get(name.as_str()) {
            Some(v) => v.parse::<f64>().with_context(|| format!("--rho {name}={v}"))?,
            None => args
                .default_rho
                .with_context(|| format!("no ρ for system {name}: pass --rho {name}=R or --default-rho"))?,
        };
        let scores = load_scores(Path::new(path))?;
        systems.push(SystemScores::new(name, scores, rho)?);
    }
    let seed = args.seed.unwrap_or(DEFAULT_SEED);
    let built = bench::build_benchmark(&corpus, &systems, seed)?;
    let selected: Vec<SentencePair> =
        corpus.iter().filter(|p| built.records.iter().any(|r| r.id == p.id)).cloned().collect();
    let mut manifest = serde_json::to_value(&built.manifest)?;
    manifest["stats"] = serde_json::json!({
        "corpus": corpus_stats(&corpus, &args.src_lang, &args.tgt_lang),
        "benchmark": corpus_stats(&selected, &args.src_lang, &args.tgt_lang),
    });
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&manifest)?);
        return Ok(Status::Ok);
    }
    let mut sink = JsonlSink::open(args.out.as_deref())?;
    for r in &built.records {
        sink.emit(r)?;
    }
    let manifest_path = args.manifest.clone().or_else(|| {
        args.out.as_ref().map(|o| {
            let mut s = o.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        })
    });
    if let Some(path) = manifest_path {
        write_json(&path, &manifest)?;
    }
    Ok(Status::Ok)
}
