use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use duat_core::llm::ScriptedBackend;
use duat_core::model::{DemonstrationSets, LangPair};
use duat_core::prompt::{self, Query};
use serde_json::Value;

fn duat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duat"))
        .args(args)
        .env_remove("DUAT_LLM_ENDPOINT")
        .env_remove("DUAT_LLM_API_KEY")
        .output()
        .expect("run duat")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn render(query: &Query<'_>) -> String {
    prompt::render(&LangPair::new("en", "de").unwrap(), &DemonstrationSets::zero_shot(), query).unwrap()
}

const CORPUS: &str = "{\"id\":\"a\",\"src\":\"The old mill.\",\"ref\":\"Die alte Mühle.\"}\n{\"id\":\"b\",\"src\":\"A new road.\",\"ref\":\"Eine neue Straße.\"}\n";

#[test]
fn shots_without_demos_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "c.jsonl", CORPUS);
    let out = dir.path().join("o.jsonl");
    let res = duat(&[
        "translate",
        "--input",
        p(&corpus),
        "--src-lang",
        "en",
        "--tgt-lang",
        "de",
        "--dry-run",
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--demos"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "c.jsonl", CORPUS);
    let config = write(dir.path(), "run.toml", "src_lang = \"en\"\ntgt_lang = \"de\"\nshots = 0\ntemprature = 0.7\n");
    let out = dir.path().join("o.jsonl");
    let res = duat(&["translate", "--config", p(&config), "--input", p(&corpus), "--dry-run", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn config_file_fills_unset_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "c.jsonl", CORPUS);
    let config =
        write(dir.path(), "run.toml", "src_lang = \"en\"\ntgt_lang = \"de\"\nshots = 0\ntau = 0.2\nk_samples = 3\n");
    let out = dir.path().join("o.jsonl");
    let res = duat(&[
        "translate",
        "--config",
        p(&config),
        "--input",
        p(&corpus),
        "--tau",
        "0.3",
        "--dry-run",
        "--out",
        p(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["difficulty_threshold"], 0.3);
    assert_eq!(manifest["config"]["sample_count"], 3);
    assert_eq!(manifest["llm_attempts"]["diff_detect"], 6);
}

#[test]
fn missing_playbook_reply_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "c.jsonl", CORPUS);
    // only sentence "a" is scripted: a draft and five empty detections
    let mut b = ScriptedBackend::new();
    b.insert_greedy(&render(&Query::Mt { source: "The old mill." }), "Die alte Mühle.");
    let detect = render(&Query::DiffDetect { source: "The old mill.", draft: "Die alte Mühle." });
    b.insert_samples(&detect, ["None".to_string()]);
    let playbook = dir.path().join("pb.jsonl");
    b.save(&playbook).unwrap();

    let out = dir.path().join("o.jsonl");
    let res = duat(&[
        "translate",
        "--input",
        p(&corpus),
        "--src-lang",
        "en",
        "--tgt-lang",
        "de",
        "--shots",
        "0",
        "--llm-playbook",
        p(&playbook),
        "--qe-stub",
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    let records = jsonl(&out);
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["id"], "a");
    assert_eq!(records[0]["final"], "Die alte Mühle.");
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed"][0]["id"], "b");
    assert_eq!(manifest["counts"]["failed"], 1);
}

#[test]
fn synth_demos_then_rerank() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "c.jsonl", CORPUS);
    let mut b = ScriptedBackend::new();
    for (src, reference, draft) in
        [("The old mill.", "Die alte Mühle.", "Die Mühle."), ("A new road.", "Eine neue Straße.", "Ein Weg.")]
    {
        b.insert_greedy(&render(&Query::Mt { source: src }), draft);
        b.insert_greedy(&render(&Query::DemoSynth { source: src, reference }), "None");
    }
    let playbook = dir.path().join("pb.jsonl");
    b.save(&playbook).unwrap();
    let demos = dir.path().join("demos.jsonl");
    let res = duat(&[
        "synth-demos",
        "--input",
        p(&corpus),
        "--src-lang",
        "en",
        "--tgt-lang",
        "de",
        "--shots",
        "0",
        "--llm-playbook",
        p(&playbook),
        "--qe-stub",
        "--out",
        p(&demos),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let written = jsonl(&demos);
    assert_eq!(written.len(), 2);
    assert!(written.iter().all(|d| d["mt_only"] == true));

    // two runs; the stub prefers the candidate closer to the pinned pseudo-reference
    let run1 = write(
        dir.path(),
        "r1.jsonl",
        "{\"id\":\"a\",\"input\":{\"id\":\"a\",\"src\":\"The old mill.\"},\"final\":\"Die Mühle.\"}\n",
    );
    let run2 = write(
        dir.path(),
        "r2.jsonl",
        "{\"id\":\"a\",\"input\":{\"id\":\"a\",\"src\":\"The old mill.\"},\"final\":\"Die alte Mühle.\"}\n",
    );
    let out = dir.path().join("best.jsonl");
    let res =
        duat(&["rerank", "--runs", p(&run1), p(&run2), "--qe-stub", "--qe-pseudo-refs", p(&corpus), "--out", p(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let best = jsonl(&out);
    assert_eq!(best[0]["translation"], "Die alte Mühle.");
    assert_eq!(best[0]["best_run"], 1);
}
