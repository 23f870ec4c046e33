use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use moorelens::automata::MooreMachine;
use moorelens::languages::{target_machine, LanguageSpec, TaskKind};

fn moorelens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moorelens"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = moorelens(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_jsonl_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.jsonl");
    ok(&["gen-data", "--lang", "dyck:1", "--task", "state", "--count", "25", "--len", "6", "--seed", "7", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 25);
    assert!(text.lines().all(|l| l.contains("\"tokens\"")));
    assert!(dir.path().join("train.jsonl.meta.json").exists());

    let again = dir.path().join("again.jsonl");
    ok(&["gen-data", "--lang", "dyck:1", "--task", "state", "--count", "25", "--len", "6", "--seed", "7", "--out", p(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    let band = dir.path().join("band.jsonl");
    ok(&["gen-data", "--lang", "ones", "--task", "char", "--count", "5", "--len-band", "10", "--out", p(&band)]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let bad_lang = moorelens(&["gen-data", "--lang", "klingon", "--task", "state", "--out", p(&out)]);
    assert_eq!(bad_lang.status.code(), Some(2));
    let missing = moorelens(&["gen-data", "--task", "state", "--out", p(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    // no positive word of odd length in D1
    let impossible = moorelens(&[
        "gen-data", "--lang", "dyck:1", "--task", "state", "--count", "3", "--len", "5", "--sampling", "positive", "--out", p(&out),
    ]);
    assert_eq!(impossible.status.code(), Some(2));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{\"language\": \"grid:1\"").unwrap();
    let broken = moorelens(&["run", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(broken.status.code(), Some(2));
}

#[test]
fn export_round_trips_and_renders_dot() {
    let dir = tempfile::tempdir().unwrap();
    let m = target_machine(LanguageSpec::Dyck(1), TaskKind::NextChar).unwrap();
    let src = dir.path().join("d1.json");
    fs::write(&src, m.to_json_string()).unwrap();
    let json = dir.path().join("copy.json");
    let dot = dir.path().join("d1.dot");
    ok(&["export", "--machine", p(&src), "--json", p(&json), "--dot", p(&dot)]);
    assert_eq!(MooreMachine::from_json_str(&fs::read_to_string(&json).unwrap()).unwrap(), m);
    let dot = fs::read_to_string(&dot).unwrap();
    assert_eq!(dot.lines().filter(|l| l.contains("shape=circle")).count(), m.num_states());
    // validity triples over 0, 1 and end of sequence
    assert!(dot.contains("\\n101\""), "{dot}");
    assert!(dot.contains("\\n010\""), "{dot}");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"alphabet\": [\"0\", \"1\"],\n  \"initial\": }").unwrap();
    let out = moorelens(&["export", "--machine", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn single_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&["gen-data", "--lang", "grid:1", "--task", "state", "--count", "64", "--len", "8", "--seed", "1", "--out", p(&d("train.jsonl"))]);
    ok(&["gen-data", "--lang", "grid:1", "--task", "state", "--count", "16", "--len", "12", "--seed", "2", "--out", p(&d("val.jsonl"))]);
    ok(&[
        "train", "--train", p(&d("train.jsonl")), "--val", p(&d("val.jsonl")), "--max-epochs", "3", "--seed", "5", "--out",
        p(&d("m.ckpt")), "--log", p(&d("log.csv")),
    ]);
    assert_eq!(fs::read_to_string(d("log.csv")).unwrap().lines().count(), 4);
    ok(&["evaluate", "--model", p(&d("m.ckpt")), "--data", p(&d("val.jsonl")), "--report", p(&d("report.json"))]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("report.json")).unwrap()).unwrap();
    let f1 = report["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    ok(&[
        "extract", "--model", p(&d("m.ckpt")), "--time-limit", "2", "--out", p(&d("machine.json")), "--dot", p(&d("machine.dot")),
        "--stats", p(&d("stats.json")), "--agreement-band", "10", "--agreement-count", "20",
    ]);
    let machine = MooreMachine::from_json_str(&fs::read_to_string(d("machine.json")).unwrap()).unwrap();
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_states"].as_u64().unwrap() as usize, machine.num_states());
    assert!(stats["agreement"]["f1"].as_f64().is_some());

    ok(&["probe", "--model", p(&d("m.ckpt")), "--family", "zero-then-ones,alternating", "--lengths", "5,20", "--out", p(&d("probe.csv"))]);
    let rows = fs::read_to_string(d("probe.csv")).unwrap().lines().count();
    // header + positions of 0 1^5, 0 1^20, (01)^5, (01)^20 each with the empty prefix
    assert_eq!(rows, 1 + 7 + 22 + 11 + 41);
    ok(&["probe", "--model", p(&d("m.ckpt")), "--hahn", "--grid", "8,16", "--bases", "4", "--out", p(&d("hahn.csv"))]);
    assert_eq!(fs::read_to_string(d("hahn.csv")).unwrap().lines().count(), 3);

    ok(&["analyze", "--model", p(&d("m.ckpt")), "--report", p(&d("analysis")), "--suffix-max-len", "5"]);
    for f in ["m_directions.json", "a_directions.json", "similarity.csv", "attention_B010101.csv", "summary.json"] {
        assert!(d("analysis").join(f).exists(), "{f}");
    }
    let wrong = moorelens(&["evaluate", "--model", p(&d("m.ckpt")), "--data", p(&d("val.jsonl")), "--lang", "dyck:2"]);
    assert_eq!(wrong.status.code(), Some(2));
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        r#"{
  "language": "ones",
  "task": "state-prediction",
  "train": {"count": 64, "min_len": 8, "max_len": 8},
  "val": {"count": 16, "min_len": 12, "max_len": 12},
  "test_count": 8,
  "test_bands": [10, 20],
  "hyper": {"max_epochs": 3, "patience": 2},
  "seeds": [0, 1],
  "extraction": {"time_limit": 600.0, "max_queries": 2000},
  "analysis": {"suffix_max_len": 6, "probe_lengths": [20], "hahn_grid": [8, 16], "hahn_bases": 5}
}"#,
    )
    .unwrap();
    cfg
}

fn files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_is_reproducible_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["run", "--config", p(&cfg), "--seeds", "3,4", "--out", p(out)]);
    }
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    for f in &fa {
        if f.file_name().unwrap() != "timings.json" {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
        }
    }
    assert!(fa.iter().any(|f| f.starts_with("seed-3")));
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seeds"], serde_json::json!([3, 4]));
    assert_eq!(resolved["language"], "ones");
    let table = fs::read_to_string(a.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}
