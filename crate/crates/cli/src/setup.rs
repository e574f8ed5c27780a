use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use duat_core::demos::{assemble_sets, load_demos};
use duat_core::llm::{
    self, DryRunBackend, FnBackend, LlmBackend, LlmGateway, OpenAiBackend, RecordingBackend, ScriptedBackend,
};
use duat_core::model::{load_corpus, CorpusFormat, DemonstrationSets, LangPair, PipelineConfig, SentencePair};
use duat_core::pipeline::{Ablation, Pipeline};
use duat_core::qe::{self, DryRunQe, HttpQe, QeBackend, QeClient, StubQe};
use duat_core::transport::AttemptError;

use crate::args::RunArgs;

const HTTP_TIMEOUT: Duration = Duration::from_secs(120);
const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

/// Everything a translation command needs, built from resolved arguments.
pub struct Env {
    pub args: RunArgs,
    pub pipeline: Pipeline,
    pub recorder: Option<Arc<RecordingBackend>>,
    pub dry_llm: Option<Arc<DryRunBackend>>,
    pub dry_qe: Option<Arc<DryRunQe>>,
}

pub fn corpus(args: &RunArgs) -> anyhow::Result<Vec<SentencePair>> {
    let path = args.input.as_deref().context("--input is required")?;
    read_corpus(path)
}

pub fn read_corpus(path: &Path) -> anyhow::Result<Vec<SentencePair>> {
    load_corpus(path, CorpusFormat::from_path(path)).with_context(|| format!("loading corpus {}", path.display()))
}

pub fn lang_pair(args: &RunArgs) -> anyhow::Result<LangPair> {
    let src = args.src_lang.as_deref().context("--src-lang is required")?;
    let tgt = args.tgt_lang.as_deref().context("--tgt-lang is required")?;
    Ok(LangPair::new(src, tgt)?)
}

/// Demonstration sets for `shots`; zero shots needs no demos file.
pub fn demo_sets(args: &RunArgs, shots: usize) -> anyhow::Result<DemonstrationSets> {
    if shots == 0 {
        return Ok(DemonstrationSets::zero_shot());
    }
    let path = args.demos.as_deref().with_context(|| format!("--shots {shots} needs --demos (or use --shots 0)"))?;
    let demos = load_demos(path)?;
    Ok(assemble_sets(&demos, shots, args.seed())?)
}

type LlmSetup = (Arc<dyn LlmBackend>, Option<Arc<DryRunBackend>>);

fn llm_backend(args: &RunArgs) -> anyhow::Result<LlmSetup> {
    let model = args
        .llm_model
        .clone()
        .or_else(|| std::env::var(llm::ENV_MODEL).ok())
        .unwrap_or_else(|| DEFAULT_MODEL.to_string());
    if args.dry_run {
        let dry = Arc::new(DryRunBackend::new(&model));
        return Ok((dry.clone(), Some(dry)));
    }
    if let Some(path) = &args.llm_playbook {
        let scripted = ScriptedBackend::load(path).with_context(|| format!("loading playbook {}", path.display()))?;
        return Ok((Arc::new(scripted), None));
    }
    if let Some(endpoint) = &args.llm_endpoint {
        let key = std::env::var(llm::ENV_API_KEY).ok();
        return Ok((Arc::new(OpenAiBackend::new(endpoint, key, &model, HTTP_TIMEOUT)?), None));
    }
    match OpenAiBackend::from_env(HTTP_TIMEOUT) {
        Some(backend) => Ok((Arc::new(backend?), None)),
        None => bail!("no LLM backend: pass --llm-playbook or --llm-endpoint (or set {})", llm::ENV_ENDPOINT),
    }
}

fn qe_client(args: &RunArgs, config: &PipelineConfig) -> anyhow::Result<(QeClient, Option<Arc<DryRunQe>>)> {
    let ids = [&config.qe_sentence_scorer, &config.qe_token_scorer, &config.qe_reference_scorer];
    let build = |backend: Arc<dyn QeBackend>| {
        QeClient::new(backend, &config.qe_sentence_scorer, &config.qe_token_scorer, &config.qe_reference_scorer)
    };
    if args.dry_run {
        let dry = Arc::new(DryRunQe::new());
        return Ok((build(dry.clone())?, Some(dry)));
    }
    if let Some(endpoint) = &args.qe_endpoint {
        let client = build(Arc::new(HttpQe::new(endpoint, config.retry, HTTP_TIMEOUT)?))?;
        let missing = client.missing_scorers().context("QE sidecar health check")?;
        if !missing.is_empty() {
            bail!("QE sidecar does not serve {}", missing.join(", "));
        }
        return Ok((client, None));
    }
    if let Some(id) = ids.iter().find(|id| !qe::scorer_info(id).is_some_and(|s| s.stub)) {
        bail!("scorer {id} needs --qe-endpoint; the local stub serves only stub scorers");
    }
    let mut stub = StubQe::new();
    if let Some(path) = &args.qe_pseudo_refs {
        for pair in read_corpus(path)? {
            if let Some(reference) = &pair.reference {
                stub.pin(&pair.src, reference);
            }
        }
    }
    Ok((build(Arc::new(stub))?, None))
}

/// Builds backends and demonstration sets. Any error here is a configuration error.
/// With `optional_demos`, a missing demos file means zero-shot prompts.
pub fn env(args: RunArgs, optional_demos: bool) -> anyhow::Result<Env> {
    let args = args.resolve_layers()?;
    let (backend, dry_llm) = llm_backend(&args)?;
    let (backend, recorder) = match &args.record_playbook {
        Some(_) => {
            let rec = Arc::new(RecordingBackend::new(backend));
            (rec.clone() as Arc<dyn LlmBackend>, Some(rec))
        }
        None => (backend, None),
    };
    let config = args.pipeline_config(backend.id())?;
    let pair = lang_pair(&args)?;
    let shots = if optional_demos && args.demos.is_none() { 0 } else { config.shots };
    let demos = demo_sets(&args, shots)?;
    let (qe, dry_qe) = qe_client(&args, &config)?;
    let gateway =
        LlmGateway::new(backend, config.retry, config.max_in_flight).with_max_output_tokens(config.max_output_tokens);
    let pipeline = Pipeline { pair, demos, config, ablation: Ablation::default(), gateway, qe };
    Ok(Env { args, pipeline, recorder, dry_llm, dry_qe })
}

/// Environment for commands that only score: QE client, no LLM and no prompts.
pub fn env_qe_only(args: RunArgs) -> anyhow::Result<Env> {
    let args = args.resolve_layers()?;
    let backend: Arc<dyn LlmBackend> =
        Arc::new(FnBackend::new(|_: &llm::LlmRequest| Err(AttemptError::fatal("this command does not call the LLM"))));
    let config = args.pipeline_config("none")?;
    let pair = match (&args.src_lang, &args.tgt_lang) {
        (None, None) => LangPair::with_names("src", "tgt", "Source", "Target")?,
        _ => lang_pair(&args)?,
    };
    let (qe, dry_qe) = qe_client(&args, &config)?;
    let gateway = LlmGateway::new(backend, config.retry, 1);
    let demos = DemonstrationSets::zero_shot();
    let pipeline = Pipeline { pair, demos, config, ablation: Ablation::default(), gateway, qe };
    Ok(Env { args, pipeline, recorder: None, dry_llm: None, dry_qe })
}
