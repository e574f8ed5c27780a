use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use duat_core::model::{InterpretationLanguage, Mode, PartialConfig, PipelineConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU_GRID: &[f64] = &[0.10, 0.13, 0.15, 0.17, 0.19];
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "duat", version, about = "Difficult-word aware LLM translation pipeline")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Translate a corpus: draft, detect, interpret, quality-control, refine.
    Translate(RunArgs),
    /// Translate with pipeline components switched off.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Detect difficult words with an empty draft section.
        #[arg(long)]
        without_draft: bool,
        /// Refine once with every interpretation, skipping quality control.
        #[arg(long)]
        without_iqc: bool,
    },
    /// Repeat translation over a grid of difficulty thresholds.
    SweepTau {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Synthesize demonstrations from a corpus with references.
    SynthDemos {
        #[command(flatten)]
        run: RunArgs,
        /// Use at most this many pairs.
        #[arg(long)]
        max_pairs: Option<usize>,
        /// Skip pairs whose reference scores below this under reference-free QE.
        #[arg(long)]
        min_reference_qe: Option<f64>,
        /// Also write the assembled demonstration sets (JSON) here.
        #[arg(long)]
        sets_out: Option<PathBuf>,
    },
    /// Pick the best translation per sentence across several run outputs.
    Rerank {
        #[command(flatten)]
        run: RunArgs,
        /// Translation JSONL files to choose from.
        #[arg(long = "runs", num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Build a hard-sample benchmark from per-system metric scores.
    BuildBench(BenchArgs),
}

/// Flags shared by the translation commands. Every field can also come from a
/// TOML config file (same names, snake_case); flags win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Replay the arguments recorded in a run manifest.
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,

    /// Corpus (JSONL with id/src/ref, or TSV src<TAB>ref).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Source language code (e.g. en, zh).
    #[arg(long)]
    pub src_lang: Option<String>,
    /// Target language code.
    #[arg(long)]
    pub tgt_lang: Option<String>,
    /// Detection mode [default: duat-e].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Difficulty threshold; words scoring strictly above it are selected [default: 0.14].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Sampled detection draws [default: 5].
    #[arg(long)]
    pub k_samples: Option<usize>,
    /// Detection sampling temperature [default: 0.5].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Demonstrations per prompt [default: 8].
    #[arg(long)]
    pub shots: Option<usize>,
    /// Demonstrations file (JSONL from synth-demos).
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// Language of the interpretations [default: target].
    #[arg(long, value_enum)]
    pub interp_language: Option<InterpLanguageArg>,

    /// OpenAI-compatible API base URL. The key is read from DUAT_LLM_API_KEY.
    #[arg(long, conflicts_with = "llm_playbook")]
    pub llm_endpoint: Option<String>,
    /// Model name sent to the endpoint (or DUAT_LLM_MODEL).
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Scripted replies (JSONL playbook).
    #[arg(long)]
    pub llm_playbook: Option<PathBuf>,
    /// Record every LLM reply to this playbook file.
    #[arg(long)]
    pub record_playbook: Option<PathBuf>,
    /// Output token budget per call [default: 1024].
    #[arg(long)]
    pub max_output_tokens: Option<usize>,
    /// Concurrent LLM requests [default: 8].
    #[arg(long)]
    pub max_in_flight: Option<usize>,

    /// QE sidecar base URL.
    #[arg(long, conflicts_with = "qe_stub")]
    pub qe_endpoint: Option<String>,
    /// Use the local deterministic QE stub (the default without --qe-endpoint).
    #[arg(long)]
    pub qe_stub: bool,
    /// Pseudo-references for the stub sentence scorer (corpus file; src is pinned to ref).
    #[arg(long)]
    pub qe_pseudo_refs: Option<PathBuf>,
    /// Reference-free sentence scorer id.
    #[arg(long)]
    pub qe_sentence_scorer: Option<String>,
    /// Span scorer id.
    #[arg(long)]
    pub qe_token_scorer: Option<String>,
    /// Reference-based scorer id (demo synthesis).
    #[arg(long)]
    pub qe_reference_scorer: Option<String>,

    /// Seed for demonstration sampling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run manifest (JSON). Defaults to <out>.manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Sentences processed concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Write the prompts and wire requests instead of sending them.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    DuatI,
    DuatE,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DuatI => Mode::DuatI,
            ModeArg::DuatE => Mode::DuatE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpLanguageArg {
    Target,
    Source,
    SourceThenTranslate,
}

impl From<InterpLanguageArg> for InterpretationLanguage {
    fn from(l: InterpLanguageArg) -> Self {
        match l {
            InterpLanguageArg::Target => InterpretationLanguage::Target,
            InterpLanguageArg::Source => InterpretationLanguage::Source,
            InterpLanguageArg::SourceThenTranslate => InterpretationLanguage::SourceThenTranslate,
        }
    }
}

macro_rules! overlay {
    ($base:expr, $top:expr; $($opt:ident),* ; $($flag:ident),*) => {
        RunArgs {
            config: $top.config.or($base.config),
            replay: $top.replay.or($base.replay),
            $($opt: $top.$opt.or($base.$opt),)*
            $($flag: $top.$flag || $base.$flag,)*
        }
    };
}

impl RunArgs {
    /// Fields set in `top` win over `self`.
    pub fn overlay(self, top: RunArgs) -> RunArgs {
        overlay!(self, top;
            input, src_lang, tgt_lang, mode, tau, k_samples, temperature, shots, demos, interp_language,
            llm_endpoint, llm_model, llm_playbook, record_playbook, max_output_tokens, max_in_flight,
            qe_endpoint, qe_pseudo_refs, qe_sentence_scorer, qe_token_scorer, qe_reference_scorer,
            seed, out, manifest, jobs;
            qe_stub, dry_run)
    }

    /// Layers: replayed manifest, then config file, then flags.
    pub fn resolve_layers(self) -> anyhow::Result<RunArgs> {
        let mut merged = RunArgs::default();
        if let Some(path) = &self.replay {
            merged = merged.overlay(replayed_args(path)?);
        }
        if let Some(path) = &self.config {
            merged = merged.overlay(load_config_file(path)?);
        }
        Ok(merged.overlay(self))
    }

    pub fn partial_config(&self) -> PartialConfig {
        PartialConfig {
            mode: self.mode.map(Mode::from),
            shots: self.shots,
            sample_count: self.k_samples,
            sample_temperature: self.temperature,
            difficulty_threshold: self.tau,
            interpretation_language: self.interp_language.map(InterpretationLanguage::from),
            qe_sentence_scorer: self.qe_sentence_scorer.clone(),
            qe_token_scorer: self.qe_token_scorer.clone(),
            qe_reference_scorer: self.qe_reference_scorer.clone(),
            llm_backend: None,
            max_output_tokens: self.max_output_tokens,
            max_in_flight: self.max_in_flight,
            retry: None,
        }
    }

    pub fn pipeline_config(&self, llm_backend: &str) -> anyhow::Result<PipelineConfig> {
        let mut partial = self.partial_config();
        partial.llm_backend = Some(llm_backend.to_string());
        Ok(partial.resolve()?)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.manifest.clone().or_else(|| {
            self.out.as_ref().map(|o| {
                let mut s = o.clone().into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            })
        })
    }
}

pub fn load_config_file(path: &Path) -> anyhow::Result<RunArgs> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn replayed_args(path: &Path) -> anyhow::Result<RunArgs> {
    #[derive(Deserialize)]
    struct Recorded {
        args: RunArgs,
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let recorded: Recorded =
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    Ok(recorded.args)
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Corpus the scores refer to.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Per-system score file, as SYSTEM=PATH (JSONL of {"id", "score"}). Repeat per system.
    #[arg(long = "scores", value_parser = parse_key_value, required = true)]
    pub scores: Vec<(String, String)>,
    /// Per-system bottom fraction, as SYSTEM=RHO.
    #[arg(long = "rho", value_parser = parse_key_value)]
    pub rho: Vec<(String, String)>,
    /// Fraction for systems without their own --rho.
    #[arg(long)]
    pub default_rho: Option<f64>,
    /// Seed for the validation/test split [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Benchmark JSONL (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest JSON. Defaults to <out>.manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Language codes for the length statistics.
    #[arg(long, default_value = "en")]
    pub src_lang: String,
    #[arg(long, default_value = "en")]
    pub tgt_lang: String,
    /// Report what would be built without writing files.
    #[arg(long)]
    pub dry_run: bool,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}
