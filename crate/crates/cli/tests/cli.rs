use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn neuraldb(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuraldb"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NEURALDB_OUT")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// The single error line, checked for the machine-readable shape.
fn error_line(out: &Output) -> String {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with("error: kind="), "{stderr}");
    assert!(lines[0].contains(" reason=\""), "{stderr}");
    lines[0].to_string()
}

#[test]
fn eval_of_2000_synthetic_facts_has_perfect_replay_efficacy() {
    let dir = tempfile::tempdir().unwrap();
    let out = neuraldb(&["eval", "--method", "neuraldb", "--gamma", "0.65", "--synth", "2000", "--out", "run"], dir.path());
    ok(&out);
    let run = dir.path().join("run");
    let report = json(&run.join("report.json"));
    assert_eq!(report["mode"], "top1");
    assert_eq!(report["efficacy"]["successes"], 2000);
    assert_eq!(report["efficacy"]["attempts"], 2000);
    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(summary.contains("\nefficacy,top1,2000,2000,0,1.000000\n"), "{summary}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("efficacy,top1,2000,2000"));

    let manifest = json(&run.join("manifest.json"));
    let cfg = &manifest["config"];
    assert_eq!(cfg["command"], "eval");
    assert_eq!(cfg["edit"]["config"]["method"]["gamma"], 0.65);
    assert_eq!(cfg["edit"]["layers"], serde_json::json!([2]));
    assert_eq!(cfg["facts"]["synth"]["count"], 2000);
    assert_eq!(cfg["model"]["toy"]["seed"], 42);
    assert_eq!(cfg["mode"], "top1");
    assert_eq!(cfg["edit"]["config"]["fit"]["steps"], 100);
    assert_eq!(manifest["outputs"], serde_json::json!(["report.json", "summary.csv", "items.csv", "facts.jsonl"]));
}

#[test]
fn alphaedit_diagnostics_separate_positive_from_negative_scores() {
    let dir = tempfile::tempdir().unwrap();
    ok(&neuraldb(&["diagnose", "--method", "alphaedit", "--synth", "50", "--out", "d"], dir.path()));
    let csv = fs::read_to_string(dir.path().join("d/scores.csv")).unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for line in csv.lines().skip(1) {
        let (pool, score) = line.split_once(',').unwrap();
        let x: f64 = score.parse().unwrap();
        match pool {
            "positive" => pos.push(x),
            "negative" => neg.push(x),
            other => panic!("unknown pool {other}"),
        }
    }
    // 50 edit prompts plus two paraphrases each, scored against 50 entries
    assert_eq!(pos.len(), 150);
    assert_eq!(neg.len(), 150 * 49);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&pos) > mean(&neg) + 0.1, "{} vs {}", mean(&pos), mean(&neg));
    let d = json(&dir.path().join("d/diagnostics.json"));
    assert!((d["positive"]["mean"].as_f64().unwrap() - mean(&pos)).abs() < 1e-12);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = neuraldb(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(neuraldb(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn identical_runs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["eval", "--synth", "40", "--mode", "preference"];
    ok(&neuraldb(&[&args[..], &["--seed", "5", "--out", "a"]].concat(), dir.path()));
    ok(&neuraldb(&[&args[..], &["--seed", "5", "--out", "b", "--jobs", "1"]].concat(), dir.path()));
    for f in ["report.json", "summary.csv", "items.csv", "facts.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    ok(&neuraldb(&[&args[..], &["--out", "c", "--seed", "6"]].concat(), dir.path()));
    assert_ne!(
        fs::read(dir.path().join("a/items.csv")).unwrap(),
        fs::read(dir.path().join("c/items.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "gamma = 0.9\nseed = 3\nsynth = 12\nsteps = 50\n").unwrap();
    ok(&neuraldb(&["build-db", "--config", "run.toml", "--gamma", "0.7", "--out", "o"], dir.path()));
    let cfg = json(&dir.path().join("o/manifest.json"))["config"].clone();
    assert_eq!(cfg["edit"]["config"]["method"]["gamma"], 0.7);
    assert_eq!(cfg["edit"]["config"]["fit"]["steps"], 50);
    assert_eq!(cfg["edit"]["config"]["fit"]["seed"], 3);
    assert_eq!(cfg["facts"]["synth"]["seed"], 3);
    assert_eq!(cfg["facts"]["synth"]["count"], 12);
    assert_eq!(json(&dir.path().join("o/db.json"))["gamma"], 0.7);

    // a fact source on the command line replaces the file's as a whole
    fs::copy(dir.path().join("o/facts.jsonl"), dir.path().join("f.jsonl")).unwrap();
    ok(&neuraldb(&["build-db", "--config", "run.toml", "--facts", "f.jsonl", "--out", "p"], dir.path()));
    let cfg = json(&dir.path().join("p/manifest.json"))["config"].clone();
    assert!(cfg["facts"]["file"].is_string());
    assert!(!dir.path().join("p/facts.jsonl").exists());
}

#[test]
fn output_root_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_neuraldb"))
        .args(["bench", "--sizes", "100,200", "--d1", "8", "--d2", "4", "--queries", "5"])
        .current_dir(dir.path())
        .env("NEURALDB_OUT", dir.path().join("envroot"))
        .output()
        .unwrap();
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("envroot/scaling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("m,"));
    let manifest = json(&dir.path().join("envroot/manifest.json"));
    assert_eq!(manifest["config"]["bench"]["sizes"], serde_json::json!([100, 200]));
}

#[test]
fn invalid_configurations_fail_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.toml"), "gamma = 0.7\ngamme = 0.8\n").unwrap();
    fs::write(dir.path().join("both.toml"), "synth = 3\nfacts = \"x.jsonl\"\n").unwrap();
    let cases: &[&[&str]] = &[
        &["eval", "--synth", "5", "--gamma", "1.5"],
        &["eval", "--synth", "5", "--method", "memit", "--beta=-1"],
        &["eval", "--synth", "5", "--method", "memit", "--gamma", "0.5"],
        &["eval", "--synth", "5", "--layers", "2,1"],
        &["eval", "--synth", "5", "--scheme", "new"],
        &["eval", "--synth", "0"],
        &["eval"],
        &["eval", "--facts", "missing.jsonl"],
        &["build-db", "--synth", "5", "--method", "memit"],
        &["diagnose", "--synth", "5", "--layers", "1,2"],
        &["query", "--synth", "5"],
        &["crud", "--db", "missing.ndb"],
        &["bench", "--sizes", "20,10"],
        &["bench", "--synth", "5"],
        &["eval", "--synth", "5", "--jobs", "0"],
        &["eval", "--config", "typo.toml", "--synth", "5"],
        &["eval", "--config", "both.toml"],
        &["eval", "--config", "nope.toml", "--synth", "5"],
    ];
    for args in cases {
        let out = neuraldb(&[args, &["--out", "never"][..]].concat(), dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(error_line(&out).starts_with("error: kind=config "), "{args:?}");
        assert!(!dir.path().join("never").exists(), "{args:?}");
    }
    // clap's own usage errors
    let out = neuraldb(&["eval", "--synth", "5", "--facts", "x", "--out", "never"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = neuraldb(&["eval", "--method", "sgd"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_remove_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": 1, \"subject\": [3]}\n").unwrap();
    let out = neuraldb(&["eval", "--facts", "bad.jsonl", "--out", "deep/run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let line = error_line(&out);
    assert!(line.starts_with("error: kind=input "), "{line}");
    assert!(line.contains("line 1"), "{line}");
    assert!(!dir.path().join("deep").exists());

    // a layer beyond the model is only known once the model is loaded
    let out = neuraldb(&["eval", "--synth", "3", "--layers", "9", "--out", "deep/run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("deep").exists());

    // an existing output directory survives, and so do files it already held
    fs::create_dir(dir.path().join("keep")).unwrap();
    fs::write(dir.path().join("keep/notes.txt"), "x").unwrap();
    fs::write(dir.path().join("corrupt.ndb"), b"NEURALDB garbage").unwrap();
    let out = neuraldb(&["crud", "--db", "corrupt.ndb", "--out", "keep"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).starts_with("error: kind=format "));
    let left: Vec<_> = fs::read_dir(dir.path().join("keep")).unwrap().collect();
    assert_eq!(left.len(), 1);
}

#[test]
fn database_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&neuraldb(&["build-db", "--synth", "30", "--seed", "2", "--out", "db"], p));
    assert_eq!(json(&p.join("db/db.json"))["entries"], 30);

    ok(&neuraldb(&["query", "--db", "db/db.ndb", "--facts", "db/facts.jsonl", "--out", "q1"], p));
    let q = json(&p.join("q1/query.json"));
    assert_eq!((q["hits"].as_u64(), q["matched_own_entry"].as_u64()), (Some(30), Some(30)));

    ok(&neuraldb(&["crud", "--db", "db/db.ndb", "--op", "remove", "--ids", "0,1,2,999", "--out", "c1"], p));
    let c = json(&p.join("c1/db.json"));
    assert_eq!(c["affected"], 3);
    assert_eq!(c["database"]["entries"], 27);
    ok(&neuraldb(&["query", "--db", "c1/db.ndb", "--facts", "db/facts.jsonl", "--out", "q2"], p));
    let q = json(&p.join("q2/query.json"));
    assert_eq!(q["matched_own_entry"], 27);
    let rows = fs::read_to_string(p.join("q2/query.csv")).unwrap();
    for line in rows.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if ["0", "1", "2"].contains(&cols[0]) {
            assert_ne!(cols[3], cols[0], "{line}");
        }
    }

    // the removed facts go back in; the survivors are rejected as duplicates
    let facts = fs::read_to_string(p.join("db/facts.jsonl")).unwrap();
    let first3: String = facts.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(p.join("first3.jsonl"), &first3).unwrap();
    ok(&neuraldb(&["crud", "--db", "c1/db.ndb", "--op", "insert", "--facts", "first3.jsonl", "--out", "c2"], p));
    assert_eq!(json(&p.join("c2/db.json"))["database"]["entries"], 30);
    let out = neuraldb(&["crud", "--db", "c2/db.ndb", "--op", "insert", "--facts", "first3.jsonl", "--out", "c3"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(!p.join("c3").exists());

    ok(&neuraldb(&["crud", "--db", "c2/db.ndb", "--op", "update", "--facts", "db/facts.jsonl", "--out", "c4"], p));
    assert_eq!(json(&p.join("c4/db.json"))["affected"], 30);
    ok(&neuraldb(&["crud", "--db", "c4/db.ndb", "--out", "c5"], p));
    assert_eq!(json(&p.join("c5/db.json"))["op"], "stats");
    assert!(!p.join("c5/db.ndb").exists());
}

#[test]
fn linear_and_multilayer_edits_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&neuraldb(&["edit", "--synth", "10", "--method", "memit", "--beta", "0.5", "--preserve", "32", "--out", "m"], p));
    let e = json(&p.join("m/edit.json"));
    assert_eq!(e["method"], "memit");
    let delta = fs::read_to_string(p.join("m/delta_layer2.csv")).unwrap();
    assert_eq!(delta.lines().count(), 64);
    assert_eq!(delta.lines().next().unwrap().split(',').count(), 128);
    let cfg = json(&p.join("m/manifest.json"))["config"].clone();
    assert_eq!(cfg["edit"]["config"]["method"], serde_json::json!({"method": "memit", "beta": 0.5, "preserve": 32}));

    ok(&neuraldb(&["edit", "--synth", "10", "--layers", "0,1,2", "--scheme", "new", "--out", "n"], p));
    let e = json(&p.join("n/edit.json"));
    assert_eq!(e["layers"].as_array().unwrap().len(), 3);
    for l in 0..3 {
        assert!(p.join(format!("n/layer{l}.ndb")).exists());
    }
    assert_eq!(json(&p.join("n/manifest.json"))["config"]["edit"]["scheme"], "new");
}
