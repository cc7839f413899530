use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dprel::accountant::epsilon_for;
use serde_json::Value;

fn dprel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dprel")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = dprel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    records(&out.stdout)
}

fn records(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| serde_json::from_str(l).expect("JSON line"))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_GRAPH: [&str; 8] =
    ["--entities", "120", "--communities", "4", "--vocab-size", "60", "--p-in", "0.3"];

/// synth → split → train → eval/probe/attack into `dir`.
fn pipeline(dir: &Path, seed: &str, threads: &str) -> Vec<Value> {
    let g = dir.join("graph");
    let m = dir.join("model");
    let mut synth = vec!["synth", "--seed", seed, "--out", s(&g)];
    synth.extend(SMALL_GRAPH);
    ok(&synth);
    ok(&["split", "--seed", seed, "--graph", s(&g), "--out", s(&g)]);
    ok(&[
        "train", "--seed", seed, "--threads", threads, "--graph", s(&g), "--out", s(&m),
        "--embed-dim", "8", "--blocks", "8", "--negatives", "3", "--batch-size", "16",
        "--steps", "25", "--clip", "1.0", "--epsilon", "5",
    ]);
    let ckpt = m.join("model.ckpt");
    let mut out = ok(&["eval", "--seed", seed, "--graph", s(&g), "--checkpoint", s(&ckpt), "--eval-batch", "16"]);
    out.extend(ok(&["probe", "--seed", seed, "--graph", s(&g), "--checkpoint", s(&ckpt), "--shots", "3"]));
    out.extend(ok(&[
        "attack", "--seed", seed, "--graph", s(&g), "--checkpoint", s(&ckpt), "--mia-pairs", "30",
        "--out", s(&dir.join("attack")),
    ]));
    out
}

#[test]
fn pipeline_is_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path(), "11", "1");
    let rb = pipeline(b.path(), "11", "2");
    assert_eq!(ra, rb);
    for f in ["graph/entities.tsv", "graph/relations.tsv", "graph/train.tsv", "model/model.ckpt", "model/train_log.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let prec = ra[0]["prec1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&prec));
    assert!(ra[1]["macro_f1"].as_f64().is_some());
    assert_eq!(ra[2]["n_pairs"], 30);
    assert!(ra.iter().any(|r| r["histogram"] == "member"));

    let privacy: Value = serde_json::from_str(&fs::read_to_string(a.path().join("model/privacy.json")).unwrap()).unwrap();
    let eps = privacy["epsilon"].as_f64().unwrap();
    assert!(eps <= 5.0 && eps > 4.9, "ε = {eps}");

    let c = tempfile::tempdir().unwrap();
    let rc = pipeline(c.path(), "12", "1");
    assert_ne!(
        fs::read(a.path().join("model/model.ckpt")).unwrap(),
        fs::read(c.path().join("model/model.ckpt")).unwrap()
    );
    assert_eq!(rc.len(), ra.len());
}

#[test]
fn manifest_replay_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "3", "1");
    let manifest = dir.path().join("model/manifest.json");
    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["privacy"]["epsilon"], 5.0);
    assert!(m["privacy"]["sigma"].as_f64().unwrap() > 0.0);
    let again = dir.path().join("again");
    ok(&["replay", s(&manifest), "--out", s(&again)]);
    assert_eq!(
        fs::read(dir.path().join("model/model.ckpt")).unwrap(),
        fs::read(again.join("model.ckpt")).unwrap()
    );
    assert!(again.join("manifest.json").is_file());
}

#[test]
fn account_prints_epsilon_table() {
    let rows = ok(&["account", "--q", "0.01", "--sigma", "1.0", "--steps", "1000", "--delta", "1e-5"]);
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[9]["steps"], 1000);
    let eps: Vec<f64> = rows.iter().map(|r| r["epsilon"].as_f64().unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[0] <= w[1]));
    for r in &rows {
        let t = r["steps"].as_u64().unwrap();
        // JSON parsing may round the last bit.
        let want = epsilon_for(0.01, 1.0, t, 1e-5).unwrap();
        assert!((r["epsilon"].as_f64().unwrap() - want).abs() <= 1e-15 * want);
    }
    // Full batch, one step: min over integer orders of α/2σ² + conversion terms.
    let one = ok(&["account", "--q", "1", "--sigma", "4", "--steps", "1", "--delta", "1e-5"]);
    assert!((one[0]["epsilon"].as_f64().unwrap() - 1.0126).abs() < 1e-3);
}

#[test]
fn calibrate_meets_target() {
    let r = ok(&["calibrate", "--epsilon", "4", "--q", "0.0136", "--steps", "2000", "--delta", "5e-5"]);
    let eps = r[0]["epsilon"].as_f64().unwrap();
    assert!(eps <= 4.0 && 4.0 - eps <= 0.01);
}

#[test]
fn epsilon_and_sigma_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[privacy]\nclip = 1.0\nsigma = 0.8\n").unwrap();
    let g = dir.path().join("g");
    let mut synth = vec!["synth", "--out", s(&g)];
    synth.extend(SMALL_GRAPH);
    ok(&synth);
    ok(&["split", "--graph", s(&g), "--out", s(&g)]);
    let out = dprel(&["train", "--config", s(&cfg), "--epsilon", "10", "--graph", s(&g), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not both"));
}

#[test]
fn flags_override_config_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 4\n\n[accountant]\nq = 0.01\nsigma = 1.0\nsteps = 100\ndelta = 1e-5\n").unwrap();
    let out = dprel(&["account", "--config", s(&cfg), "--sigma", "2.0"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: --sigma 2.0 overrides [accountant] sigma"));
    let rows = records(&out.stdout);
    assert_eq!(rows[0]["sigma"], 2.0);
    let same = dprel(&["account", "--config", s(&cfg), "--sigma", "1.0"]);
    assert!(!String::from_utf8_lossy(&same.stderr).contains("warning"));
}

#[test]
fn errors_have_categories() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dprel(&["account", "--bogus"]).status.code(), Some(2));
    assert_eq!(dprel(&["account", "--q", "0.1"]).status.code(), Some(3));
    let missing = dprel(&["split", "--graph", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[privacy]\nclipp = 1.0\n").unwrap();
    assert_eq!(dprel(&["account", "--config", s(&cfg)]).status.code(), Some(3));
    let ents = dir.path().join("e.tsv");
    let rels = dir.path().join("r.tsv");
    fs::write(&ents, "0\t1,2\n1\t3\n").unwrap();
    fs::write(&rels, "0\t7\n").unwrap();
    let bad = dprel(&["ingest", "--entities", s(&ents), "--relations", s(&rels), "--out", s(&dir.path().join("o"))]);
    assert_eq!(bad.status.code(), Some(5));
}

#[test]
fn ingest_canonicalizes_text_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let (ents, rels, vocab) = (dir.path().join("e.tsv"), dir.path().join("r.tsv"), dir.path().join("v.tsv"));
    fs::write(&vocab, "red\t1\nblue\t2\nshoe\t3\n").unwrap();
    fs::write(&ents, "1\tblue shoe\n0\tred shoe unknown\n2\tred\n").unwrap();
    fs::write(&rels, "2\t0\n0\t1\n").unwrap();
    let out = dir.path().join("out");
    let r = ok(&[
        "ingest", "--entities", s(&ents), "--relations", s(&rels), "--vocab", s(&vocab), "--out", s(&out),
    ]);
    assert_eq!(r[0]["entities"], 3);
    assert_eq!(r[0]["relations"], 2);
    assert_eq!(fs::read_to_string(out.join("relations.tsv")).unwrap(), "0\t1\n0\t2\n");
    let again = dir.path().join("again");
    ok(&["ingest", "--entities", s(&out.join("entities.tsv")), "--relations", s(&out.join("relations.tsv")), "--out", s(&again)]);
    assert_eq!(fs::read(out.join("entities.tsv")).unwrap(), fs::read(again.join("entities.tsv")).unwrap());
}

#[test]
fn rr_baseline_densifies_small_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    let mut synth = vec!["synth", "--out", s(&g)];
    synth.extend(SMALL_GRAPH);
    ok(&synth);
    let r = ok(&["rr-baseline", "--graph", s(&g), "--epsilon", "1", "--seed", "2", "--out", s(&dir.path().join("rr"))]);
    let input = r[0]["input_relations"].as_f64().unwrap();
    let output = r[0]["output_relations"].as_f64().unwrap();
    let expected = r[0]["expected_output_relations"].as_f64().unwrap();
    let sd = (7140.0f64 * 0.2689 * 0.7311).sqrt();
    assert!((output - expected).abs() <= 3.0 * sd);
    assert!(output > input);
    let lines = fs::read_to_string(dir.path().join("rr/relations.tsv")).unwrap().lines().count();
    assert_eq!(lines as f64, output);
}
