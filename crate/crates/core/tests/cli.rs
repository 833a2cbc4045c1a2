use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic").join(name)
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("corpus")).unwrap();
        for f in ["captions.json", "instances.json"] {
            std::fs::copy(fixture(f), dir.path().join("corpus").join(f)).unwrap();
        }
        std::fs::write(
            dir.path().join("config.json"),
            r#"{
  "run_id": "cli",
  "global_seed": 42,
  "captions_path": "corpus/captions.json",
  "instances_path": "corpus/instances.json",
  "embedding_run": "embeddings",
  "output_dir": "out",
  "tasks": {"entailment": true, "recognition": {"categories": ["person", "dog", "car"]}},
  "case_study": {"sample_size": 50}
}
"#,
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn raw(&self, args: &[&str], envs: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_layerprobe"));
        cmd.current_dir(self.path()).env_remove("LAYERPROBE_OUTPUT");
        for (k, v) in envs {
            cmd.env(k, v);
        }
        cmd.args(["--config", "config.json"]).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.raw(args, &[]);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn err(&self, args: &[&str]) -> Value {
        let out = self.raw(args, &[]);
        assert_eq!(out.status.code(), Some(2), "{args:?} should fail");
        let record: Value = serde_json::from_slice(&out.stderr).unwrap();
        record["error"].clone()
    }

    fn prepare(&self) {
        self.ok(&["ingest"]);
        self.ok(&["synth-embeddings", "--out", "embeddings"]);
        self.ok(&["build-dataset"]);
        self.ok(&["synth-features", "--out", "features", "--layers", "3"]);
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path().join(rel)).unwrap()
    }
}

#[test]
fn stage_order_violation_is_a_machine_readable_error() {
    let ws = Workspace::new();
    let e = ws.err(&["build-dataset"]);
    assert_eq!(e["kind"], "precondition");
    assert_eq!(e["command"], "build-dataset");
    assert!(e["message"].as_str().unwrap().contains("ingest"));
    let e = ws.err(&["report"]);
    assert_eq!(e["kind"], "precondition");
}

#[test]
fn invalid_config_is_rejected() {
    let ws = Workspace::new();
    std::fs::write(ws.path().join("config.json"), r#"{"pool_size": 0}"#).unwrap();
    assert_eq!(ws.err(&["config"])["kind"], "invalid");
    std::fs::write(ws.path().join("config.json"), r#"{"pool_sise": 10}"#).unwrap();
    let e = ws.err(&["config"]);
    assert_eq!(e["kind"], "parse");
    assert!(e["message"].as_str().unwrap().contains("pool_sise"));
}

#[test]
fn output_root_precedence_is_flag_then_env_then_config() {
    let ws = Workspace::new();
    let resolved = ws.ok(&["config"]);
    assert_eq!(resolved["output_dir"], "out");
    let out = ws.raw(&["config"], &[("LAYERPROBE_OUTPUT", "from-env")]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["output_dir"], "from-env");
    let out = ws.raw(&["--output", "from-flag", "config"], &[("LAYERPROBE_OUTPUT", "from-env")]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["output_dir"], "from-flag");
    assert_eq!(v["config_hash"], resolved["config_hash"], "output root must not change the config hash");
    let seeded = ws.ok(&["--seed", "7", "config"]);
    assert_ne!(seeded["config_hash"], resolved["config_hash"]);
}

#[test]
fn build_dataset_is_idempotent() {
    let ws = Workspace::new();
    ws.ok(&["ingest"]);
    ws.ok(&["synth-embeddings", "--out", "embeddings"]);
    ws.ok(&["build-dataset"]);
    let first = ws.read("out/datasets/entailment.jsonl");
    let index = ws.read("out/datasets/index.json");
    ws.ok(&["build-dataset"]);
    assert_eq!(first, ws.read("out/datasets/entailment.jsonl"));
    assert_eq!(index, ws.read("out/datasets/index.json"));
    let built: Value = serde_json::from_slice(&index).unwrap();
    // entailment + 2 templates x 3 categories
    assert_eq!(built["datasets"].as_array().unwrap().len(), 7);
}

#[test]
fn train_refuses_features_from_another_dataset() {
    let ws = Workspace::new();
    ws.prepare();
    // Rebuilding under another seed replaces every dump the features point to.
    ws.ok(&["--seed", "43", "build-dataset"]);
    let e = ws.err(&["--seed", "43", "--features", "features", "train"]);
    assert_eq!(e["kind"], "hash_mismatch");
    assert!(!ws.path().join("out/probes").exists(), "no probe may be trained");
}

#[test]
fn validate_features_reports_corruption() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["--features", "features", "validate-features"]);
    let layer = ws.path().join("features/entailment/layer_002.lpf");
    let mut bytes = std::fs::read(&layer).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&layer, bytes).unwrap();
    let e = ws.err(&["--features", "features", "validate-features"]);
    assert_eq!(e["kind"], "integrity");
    let report: Value = serde_json::from_slice(&ws.read("out/validation/entailment.json")).unwrap();
    let kinds: Vec<&str> = report["violations"].as_array().unwrap().iter().map(|v| v["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"checksum"), "{kinds:?}");
    let e = ws.err(&["--features", "features", "sweep"]);
    assert_eq!(e["kind"], "integrity");
}

#[test]
fn separate_train_and_evaluate_match_sweep() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["--features", "features", "train"]);
    ws.ok(&["--features", "features", "evaluate"]);
    let staged = ws.read("out/evaluations/entailment.json");
    let probe = ws.read("out/probes/entailment/layer_002.probe");
    ws.ok(&["--features", "features", "sweep"]);
    assert_eq!(staged, ws.read("out/evaluations/entailment.json"));
    assert_eq!(probe, ws.read("out/probes/entailment/layer_002.probe"));
}

#[test]
fn report_embeds_provenance_everywhere() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["--features", "features", "sweep"]);
    ws.ok(&["--features", "features", "analyze-tokens"]);
    let files = ws.ok(&["--features", "features", "report"]);
    let hash = ws.ok(&["--features", "features", "config"])["config_hash"].as_str().unwrap().to_string();
    let run: Value = serde_json::from_slice(&ws.read("out/report/cli/run.json")).unwrap();
    assert_eq!(run["config_hash"], hash.as_str());
    assert_eq!(run["global_seed"], 42);
    assert!(run["toolkit_version"].as_str().unwrap().starts_with("layerprobe/"));
    assert_eq!(run["manifest_hashes"].as_object().unwrap().len(), 7);
    for key in ["svg", "tokens"] {
        let text = std::fs::read_to_string(ws.path().join(files[key].as_str().unwrap())).unwrap();
        assert!(text.contains(&hash), "{key} lacks the config hash");
    }
    let csv = std::fs::read_to_string(ws.path().join("out/report/cli/sweeps.csv")).unwrap();
    assert!(csv.starts_with("task_tag,condition,layer,metric,score\n"));
    assert!(csv.contains("entailment,,2,accuracy,"));
    let ingest: Value = serde_json::from_slice(&ws.read("out/ingest.json")).unwrap();
    assert_eq!(ingest["config_hash"].as_str().unwrap().len(), 64);
    for json in ["out/sweeps.json", "out/tokens.json", "out/evaluations/entailment.json"] {
        let v: Value = serde_json::from_slice(&ws.read(json)).unwrap();
        assert_eq!(v["config_hash"], hash.as_str(), "{json}");
    }
}

#[test]
fn inputs_are_not_mutated() {
    let ws = Workspace::new();
    let before = (ws.read("corpus/captions.json"), ws.read("corpus/instances.json"));
    ws.prepare();
    let manifest = ws.read("features/entailment/manifest.json");
    ws.ok(&["--features", "features", "sweep"]);
    assert_eq!(before, (ws.read("corpus/captions.json"), ws.read("corpus/instances.json")));
    assert_eq!(manifest, ws.read("features/entailment/manifest.json"));
}
