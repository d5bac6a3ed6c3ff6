//! Drives the `egoshift` binary end to end on a tiny synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn egoshift(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egoshift"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stdout:\n{}\nstderr:\n{}", stdout(&out), stderr(&out));
    out
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL_DATA: [&str; 6] = ["--n", "45", "--frames", "20", "--size", "16"];

const RUN_CONFIG: &str = r#"
family = "gsn+egoaco"
seed = 3

[data]
manifest = "data/manifest.jsonl"

[train]
batch_size = 4

[gsn]
num_frames = 8
backbone = { stem_channels = 4, block_channels = [4, 8, 8] }
schedule = { base_lr = 0.01, warmup_epochs = 1, total_epochs = 2 }

[egoaco]
num_frames = 8
backbone = { stem_channels = 4, block_channels = [4, 8, 8], gsm = false }
lsta = { memory_size = 4, pooling_classes = 3 }

[egoaco.stages]
epochs = [1, 1, 1]
base_lr = [0.01, 0.01, 1e-4]
"#;

/// Synthesizes the small dataset and writes the run config into a fresh
/// working directory.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["synth", "--seed", "9", "--out", "data"];
    args.extend(SMALL_DATA);
    ok(egoshift(&args, dir.path()));
    fs::write(dir.path().join("run.toml"), RUN_CONFIG).unwrap();
    dir
}

#[test]
fn synth_is_deterministic_and_protects_output() {
    let dir = TempDir::new().unwrap();
    let run = |out: &str, seed: &str| {
        egoshift(&["synth", "--seed", seed, "--n", "500", "--frames", "4", "--size", "8", "--out", out], dir.path())
    };
    let first = ok(run("a", "1"));
    assert!(stdout(&first).contains("500"), "{}", stdout(&first));
    ok(run("b", "1"));
    ok(run("c", "2"));
    let (a, b, c) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")), tree(&dir.path().join("c")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let manifest = fs::read_to_string(dir.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 500);

    let again = run("a", "1");
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    ok(egoshift(
        &["synth", "--seed", "1", "--n", "500", "--frames", "4", "--size", "8", "--out", "a", "--force"],
        dir.path(),
    ));
    assert_eq!(tree(&dir.path().join("a")), b);
}

#[test]
fn train_infer_ensemble_eval_round_trip() {
    let ws = workspace();
    let dir = ws.path();
    ok(egoshift(&["train", "--config", "run.toml", "--out", "run"], dir));
    ok(egoshift(&["train", "--config", "run.toml", "--out", "rerun"], dir));
    assert_eq!(tree(&dir.join("run")), tree(&dir.join("rerun")), "training is not deterministic");

    let gsn_ckpt = dir.join("run/gsn/stage1_epoch2.ckpt");
    assert!(gsn_ckpt.exists());
    for (stage, file) in [(1, "stage1_epoch1.ckpt"), (2, "stage2_epoch1.ckpt"), (3, "stage3_epoch1.ckpt")] {
        assert!(dir.join("run/egoaco").join(file).exists(), "stage {stage} checkpoint missing");
    }
    let log = fs::read_to_string(dir.join("run/egoaco/train_log.jsonl")).unwrap();
    let stages: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_u64().unwrap())
        .collect();
    assert_eq!(stages, [1, 2, 3]);
    assert!(dir.join("run/config.toml").exists());

    let infer = |ckpt: &str, out: &str| {
        ok(egoshift(&["infer", "--checkpoint", ckpt, "--split", "test_s1", "--out", out], dir))
    };
    infer("run/gsn/stage1_epoch2.ckpt", "gsn.jsonl");
    infer("run/gsn/stage1_epoch2.ckpt", "gsn_again.jsonl");
    infer("run/egoaco/stage3_epoch1.ckpt", "ego.jsonl");
    let gsn_scores = fs::read(dir.join("gsn.jsonl")).unwrap();
    assert_eq!(gsn_scores, fs::read(dir.join("gsn_again.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&gsn_scores).lines().count(), 9);

    let bad = egoshift(
        &["infer", "--checkpoint", "run/egoaco/stage3_epoch1.ckpt", "--split", "test_s1", "--fully-conv", "--out", "x.jsonl"],
        dir,
    );
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("not spatially collapsible"), "{}", stderr(&bad));

    ok(egoshift(&["ensemble", "--scores", "gsn.jsonl", "ego.jsonl", "--out", "both.jsonl"], dir));
    ok(egoshift(&["ensemble", "--scores", "gsn.jsonl", "gsn.jsonl", "--out", "self.jsonl"], dir));
    let eval = |scores: &str, json: &str| {
        let out = ok(egoshift(
            &["eval", "--scores", scores, "--manifest", "data/manifest.jsonl", "--split", "test_s1", "--json", json],
            dir,
        ));
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join(json)).unwrap()).unwrap();
        (stdout(&out), report)
    };
    let (table, single) = eval("gsn.jsonl", "gsn_metrics.json");
    assert!(table.contains("Top-1 Accuracy (%)") && table.contains("test_s1"), "{table}");
    let (_, doubled) = eval("self.jsonl", "self_metrics.json");
    assert_eq!(single, doubled);
    let (_, both) = eval("both.jsonl", "both_metrics.json");
    for task in ["verb", "noun", "action"] {
        let m = &both[task];
        assert!(m["top1"].as_f64().unwrap() <= m["top5"].as_f64().unwrap());
    }

    let wrong_split = egoshift(
        &["eval", "--scores", "gsn.jsonl", "--manifest", "data/manifest.jsonl", "--split", "test_s2"],
        dir,
    );
    assert_eq!(code(&wrong_split), 2);
}

#[test]
fn invalid_config_writes_nothing() {
    let ws = workspace();
    let dir = ws.path();
    let broken = RUN_CONFIG.replace("total_epochs = 2", "total_epochs = 1").replace("epochs = [1, 1, 1]", "epochs = [1, 0, 1]");
    fs::write(dir.join("bad.toml"), broken).unwrap();
    let out = egoshift(&["train", "--config", "bad.toml", "--out", "run"], dir);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!dir.join("run").exists() || tree(&dir.join("run")).is_empty());

    fs::write(dir.join("typo.toml"), RUN_CONFIG.replace("[train]", "[trian]")).unwrap();
    let out = egoshift(&["train", "--config", "typo.toml", "--out", "run"], dir);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let dir = TempDir::new().unwrap();
    let out = ok(egoshift(&["gradcheck", "--family", "gsn"], dir.path()));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains("model/gsn")), "{text}");
    assert!(!text.contains("FAIL"));

    let out = egoshift(&["gradcheck", "--inject-fault", "conv2d"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).lines().any(|l| l.starts_with("FAIL")));

    let out = egoshift(&["gradcheck", "--inject-fault", "no_such_op"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes_for_bad_environment_and_missing_files() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_egoshift"))
        .args(["gradcheck", "--family", "gsn"])
        .env("EGOSHIFT_THREADS", "abc")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    let out = egoshift(&["ensemble", "--scores", "missing.jsonl", "--out", "x.jsonl"], dir.path());
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("missing.jsonl"), "{}", stderr(&out));
}
