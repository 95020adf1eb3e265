//! Drives the `trajeglish` binary through a miniature pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trajeglish_core::data::read_scenarios;
use trajeglish_core::rollout::load_rollouts;
use trajeglish_core::tokenizer::{discretization_report, tokenize_trajectory, TemplateSet};

const SMALL: &str = r#"
[paths]
corpus_dir = "corpus"
vocab_dir = "vocab"
tokens_dir = "tokens"
run_dir = "run"

[synth]
n_scenarios = 12
min_agents = 2
max_agents = 4
n_steps = 21
seed = 3

[vocab]
method = "kdisks"
size = 48
restarts = 1
compare = false

[model]
hidden_dim = 16
n_heads = 2
n_map_layers = 1
n_enc_layers = 1
n_dec_layers = 1
max_agents = 4
max_timesteps = 16
max_map_objects = 8
n_latent_queries = 4
dropout = 0.0

[train]
steps = 4
batch_size = 2
warmup_steps = 1

[rollout]
history = 1
horizon = 8
n_rollouts = 2

[eval]
contexts = [1, 2]
max_predecessors = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), format!("{SMALL}\n{extra}")).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_trajeglish"));
        cmd.current_dir(self.dir.path()).arg("--workers").arg("1");
        cmd.arg(args[0]).arg("--config").arg("exp.toml").args(&args[1..]);
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn missing_artifact_names_its_producer() {
    let ws = Workspace::new("");
    let out = ws.run(&["fit-vocab"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trajeglish synth"), "{err}");

    ws.ok(&["synth"]);
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trajeglish fit-vocab"));
}

#[test]
fn config_failures_exit_with_code_two() {
    let ws = Workspace::new("");
    let out = ws.run(&["synth", "--synth.no_such_key", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ws.run(&["synth", "--split.val_fraction", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ws.run(&["rollout", "--rollout.temperature", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resolved_config_is_echoed_and_reloadable() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--synth.n_scenarios", "5"]);
    let echo = ws.path("corpus/resolved_synth.toml");
    let text = read(&echo);
    assert!(text.contains("n_scenarios = 5"), "{text}");
    let out = Command::new(env!("CARGO_BIN_EXE_trajeglish"))
        .current_dir(ws.dir.path())
        .args(["show-config", "--config"])
        .arg(&echo)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), text);
}

#[test]
fn fit_vocab_is_reproducible_and_grid_sizes_multiply() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["fit-vocab"]);
    let first = std::fs::read(ws.path("vocab/templates.json")).unwrap();
    ws.ok(&["fit-vocab"]);
    assert_eq!(first, std::fs::read(ws.path("vocab/templates.json")).unwrap());

    ws.ok(&["fit-vocab", "--vocab.method", "grid_xyh", "--vocab.grid_xyh", "[8, 8, 7]"]);
    let ts = TemplateSet::load(&ws.path("vocab/templates.json")).unwrap();
    assert_eq!(ts.len(), 448);
}

#[test]
fn fit_vocab_compares_methods_in_csv() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["fit-vocab", "--vocab.compare", "true"]);
    let csv = read(&ws.path("vocab/fit_report.csv"));
    for m in ["kdisks", "kmeans", "grid_xyh", "grid_xy"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{m},"))), "{m} missing:\n{csv}");
    }
}

#[test]
fn tokenize_report_matches_library() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["fit-vocab"]);
    ws.ok(&["tokenize"]);
    let ts = TemplateSet::load(&ws.path("vocab/templates.json")).unwrap();
    let val = read_scenarios(ws.path("corpus/val.jsonl")).unwrap();
    assert_eq!(read(&ws.path("tokens/val_discretization.csv")), discretization_report(&val, &ts).to_csv());
    let lines = read(&ws.path("tokens/val_tokens.jsonl"));
    assert_eq!(lines.lines().count(), val.len());
}

#[test]
fn replay_all_reproduces_chain_tokenized_logs() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["fit-vocab"]);
    ws.ok(&["train"]);
    ws.ok(&["rollout", "--replay-all"]);
    let ts = TemplateSet::load(&ws.path("vocab/templates.json")).unwrap();
    let val = read_scenarios(ws.path("corpus/val.jsonl")).unwrap();
    let rollouts = load_rollouts(ws.path("run/rollouts.jsonl")).unwrap();
    assert_eq!(rollouts.len(), 2 * val.len());
    for r in &rollouts {
        let s = val.iter().find(|s| s.id == r.scenario_id).unwrap();
        for (i, a) in s.agents.iter().enumerate() {
            let chain = tokenize_trajectory(&a.states, &a.meta, &ts);
            assert_eq!(r.states[i], chain.snapped[..r.states[i].len()]);
            for k in 0..r.tokens.n_steps() {
                assert_eq!(r.tokens.get(i, k), chain.tokens[k]);
            }
        }
    }
}

#[test]
fn marginal_pipeline_gives_flat_predecessor_curve() {
    let ws = Workspace::new("");
    let regime = ["--model.masking_regime", "marginal"];
    ws.ok(&["synth"]);
    ws.ok(&["fit-vocab"]);
    ws.ok(&["tokenize"]);
    ws.ok(&["train", regime[0], regime[1]]);
    ws.ok(&["rollout", regime[0], regime[1]]);
    let stdout = ws.ok(&["eval", regime[0], regime[1]]);
    assert!(stdout.contains("nll"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&read(&ws.path("run/metrics.json"))).unwrap();
    let curve = report["curves"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "nll_vs_predecessors" && c["class"].is_null())
        .expect("predecessor sweep present");
    let y: Vec<f64> = curve["y"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(y.len() >= 2);
    for v in &y {
        assert!((v - y[0]).abs() < 1e-9, "{y:?}");
    }
    let csv = read(&ws.path("run/metrics.csv"));
    assert!(csv.starts_with("kind,name,condition,class,unit,x_axis,x,y\n"));
    for f in ["resolved_train.toml", "resolved_rollout.toml", "resolved_eval.toml", "train_log.csv", "model.ckpt"] {
        assert!(ws.path("run").join(f).exists(), "{f}");
    }
}

#[test]
fn rerunning_train_is_idempotent() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["fit-vocab"]);
    ws.ok(&["train"]);
    let a = std::fs::read(ws.path("run/model.ckpt")).unwrap();
    let log_a = read(&ws.path("run/train_log.csv"));
    ws.ok(&["train"]);
    assert_eq!(a, std::fs::read(ws.path("run/model.ckpt")).unwrap());
    assert_eq!(log_a, read(&ws.path("run/train_log.csv")));
}
