use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use ttct_cli::commands::MeanStd;
use ttct_cli::config::{self, OUTPUT_ROOT_ENV};
use ttct_cli::error::CliError;

const TINY: &str = r#"
[env]
width = 8
height = 8
horizon = 24
entity_counts = { lava = 3, water = 3, grass = 3 }

[corpus]
n_episodes = 80
specs_per_family = 2
constraints = { max_limit = 2 }

[ttct.encoder]
d_model = 8
layers = 1
heads = 2
ff_dim = 16
max_traj_len = 25

[ttct.train]
epochs = 2
batch_size = 16

[rl]
iterations = 2
rollout_steps = 96
minibatch = 48
update_epochs = 1
hidden = 16

[policy]
modes = ["cp", "gc"]
seeds = [0, 1]
eval_episodes = 6

[eval]
lavawall_episodes = 40
lavawall_horizon = 24
"#;

fn ttct(args: &[&str], root: &Path, config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttct"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env(OUTPUT_ROOT_ENV, root)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

/// The full tiny pipeline, run once and shared by the tests below.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let root = tmp.path().join("out");
        for cmd in ["gen-corpus", "train-ttct", "calibrate", "train-policy", "eval"] {
            ok(&ttct(&[cmd], &root, &config));
        }
        Pipeline { _tmp: tmp, root, config }
    })
}

fn scratch() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    (tmp, config)
}

#[test]
fn overrides_apply_and_unknown_keys_are_rejected() {
    let (_tmp, config) = scratch();
    let sets = ["rl.iterations=7".to_string(), "policy.modes=[\"gc\"]".to_string(), "paths.corpus=c.jsonl".into()];
    let cfg = config::load(Some(&config), &sets).unwrap();
    assert_eq!(cfg.rl.iterations, 7);
    assert_eq!(cfg.policy.modes.len(), 1);
    assert_eq!(cfg.paths.corpus, PathBuf::from("c.jsonl"));
    assert_eq!(cfg.env.horizon, 24);
    assert!(matches!(config::load(Some(&config), &["rl.nope=1".into()]), Err(CliError::Config(_))));
    assert!(matches!(config::load(Some(&config), &["noequals".into()]), Err(CliError::Config(_))));
    let defaults = config::load(None, &[]).unwrap();
    assert_eq!(defaults, config::RunConfig::default());
}

#[test]
fn output_root_prefers_flag_then_environment() {
    assert_eq!(config::output_root(Some(Path::new("/x"))), PathBuf::from("/x"));
}

#[test]
fn config_errors_exit_2() {
    let (tmp, config) = scratch();
    let root = tmp.path().join("out");
    let out = ttct(&["gen-corpus", "--set", "env.bogus=1"], &root, &config);
    assert_eq!(code(&out), 2);
    let out = ttct(&["gen-corpus"], &root, &tmp.path().join("missing.toml"));
    assert_eq!(code(&out), 2);
    let out = ttct(&["gen-corpus", "--set", "env.width=4", "--set", "env.height=4"], &root, &config);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ttct(&["train-policy", "--modes", "nope"], &root, &config);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_artifacts_exit_3_and_name_the_path() {
    let (tmp, config) = scratch();
    let root = tmp.path().join("out");
    for cmd in ["train-ttct", "calibrate", "train-policy", "eval"] {
        let out = ttct(&[cmd], &root, &config);
        assert_eq!(code(&out), 3, "{cmd}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&root.display().to_string()), "{cmd}: {err}");
    }
}

#[test]
fn corrupted_corpus_exits_3() {
    let (tmp, config) = scratch();
    let root = tmp.path().join("out");
    ok(&ttct(&["gen-corpus"], &root, &config));
    let path = root.join("corpus.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{not json";
    std::fs::write(&path, lines.join("\n")).unwrap();
    let out = ttct(&["train-ttct"], &root, &config);
    assert_eq!(code(&out), 3);
    std::fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":99", 1)).unwrap();
    assert_eq!(code(&ttct(&["train-ttct"], &root, &config)), 3);
}

#[test]
fn corpus_has_versioned_header_and_footer() {
    let p = pipeline();
    let text = std::fs::read_to_string(p.root.join("corpus.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let header: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["format_version"], 1);
    let footer: Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert_eq!(footer["footer"]["records"].as_u64().unwrap() as usize, lines.len() - 2);
    assert!(p.root.join("corpus.jsonl.timing.json").exists());
}

#[test]
fn family_flag_restricts_the_corpus() {
    let (tmp, config) = scratch();
    let root = tmp.path().join("out");
    ok(&ttct(&["gen-corpus", "--families", "sequential", "--episodes", "30"], &root, &config));
    let text = std::fs::read_to_string(root.join("corpus.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    for l in &lines[1..lines.len() - 1] {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["spec"]["family"], "sequential", "{l}");
    }
}

#[test]
fn training_writes_one_checkpoint_per_epoch_and_a_loss_curve() {
    let p = pipeline();
    let dir = p.root.join("ttct");
    for e in 1..=2 {
        assert!(dir.join(format!("epoch_{e:03}.ckpt")).exists());
    }
    assert!(!dir.join("epoch_003.ckpt").exists());
    assert!(dir.join("model.ckpt").exists());
    assert!(dir.join("model.ckpt.timing.json").exists());
    assert!(std::fs::read_to_string(dir.join("loss_curve.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn calibration_reports_threshold_and_metrics() {
    let p = pipeline();
    let report = read_json(&p.root.join("ttct/calibration.json"));
    for key in ["beta", "auc", "youden_j", "metrics", "roc"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    for key in ["accuracy", "recall", "precision", "f1"] {
        let v = report["metrics"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key}");
    }
    assert!(p.root.join("ttct/roc.svg").exists());
}

#[test]
fn policy_runs_per_mode_and_seed() {
    let p = pipeline();
    for mode in ["cp", "gc"] {
        for seed in [0, 1] {
            let run = p.root.join(format!("policy/{mode}/seed_{seed}"));
            assert!(run.join("policy.ckpt").exists());
            let metrics = std::fs::read_to_string(run.join("policy_metrics.jsonl")).unwrap();
            assert_eq!(metrics.lines().count(), 2);
            let ev = read_json(&run.join("eval.json"));
            assert_eq!(ev["seed"], seed);
            assert_eq!(ev["eval_episodes"], 6);
        }
        assert!(p.root.join(format!("policy/{mode}/learning_curve.svg")).exists());
    }
    let summary = read_json(&p.root.join("policy/summary.json"));
    let modes = summary.as_array().unwrap();
    assert_eq!(modes.len(), 2);
    for m in modes {
        assert_eq!(m["seeds"].as_array().unwrap().len(), 2);
        assert!(m["avg_cost"]["std"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn eval_writes_every_report() {
    let p = pipeline();
    let dir = p.root.join("eval");
    for f in [
        "heldout.json",
        "heldout_roc.svg",
        "pareto.json",
        "pareto.svg",
        "transfer.json",
        "transfer_roc.svg",
        "heatmap.json",
        "heatmap.csv",
        "heatmap.svg",
        "summary.json",
        "summary.json.timing.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let summary = read_json(&dir.join("summary.json"));
    assert_eq!(summary["pareto_points"], 4);
    let front = summary["pareto_front"].as_u64().unwrap();
    assert!((1..=4).contains(&front));
    let auc = summary["heldout_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let csv = std::fs::read_to_string(dir.join("heatmap.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("c_hat"));
}

#[test]
fn eval_accepts_explicit_runs_and_rejects_bad_pair() {
    let p = pipeline();
    let run = p.root.join("policy/gc/seed_0/eval.json");
    let tmp = tempfile::tempdir().unwrap();
    let copy = tmp.path().join("out");
    copy_dir(&p.root, &copy);
    let out = ttct(&["eval", "--runs", run.to_str().unwrap()], &copy, &p.config);
    ok(&out);
    assert_eq!(read_json(&copy.join("eval/summary.json"))["pareto_points"], 1);
    let out = ttct(&["eval", "--pair", "100000"], &copy, &p.config);
    assert_eq!(code(&out), 2);
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        let dest = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_dir(&p, &dest);
        } else {
            std::fs::copy(&p, &dest).unwrap();
        }
    }
}

#[test]
fn sample_standard_deviation() {
    let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.mean, 2.5);
    assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(MeanStd::of(&[3.0]).std, 0.0);
    assert!(MeanStd::of(&[]).mean.is_nan());
}
