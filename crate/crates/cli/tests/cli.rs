use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rrm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = rrm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&rrm(d, &["frobnicate"])), 1);
    assert_eq!(code(&rrm(d, &["run", "--protocol", "prop9"])), 1);
    let err = String::from_utf8(rrm(d, &["run", "--protocol", "prop9"]).stderr).unwrap();
    assert!(err.contains("artifact-curve") && err.contains("dpo-toy"), "{err}");
    assert_eq!(code(&rrm(d, &["run", "--set", "rm_train.epochs=\"x\""])), 1);
    assert_eq!(code(&rrm(d, &["--jobs", "0", "run"])), 1);
    assert_eq!(code(&rrm(d, &["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.jsonl"), "{\"context\": \"x\"}\n").unwrap();
    let out = rrm(d, &["stats", "--preferences", "bad.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    let missing = rrm(d, &["eval-rm", "--model", "none.json", "--preferences", "bad.jsonl"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.json"));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "text", "--set", "text.n=50", "--out", "c.jsonl"]);
    let out = rrm(
        d,
        &["train-rm", "--preferences", "c.jsonl", "--set", "rm_train.learning_rate=1e308", "--out", "m.json"],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "text", "--set", "text.n=60", "--out", "corpus.jsonl"]);
    let inj = ok(d, &["inject", "--input", "corpus.jsonl", "--preset", "sure-prefix", "--rate", "0.5", "--out", "dirty.jsonl"]);
    let hit = inj["artifacts"][0]["affected"].as_u64().unwrap();
    assert!(hit > 10 && hit < 50, "{inj}");

    let aug = ok(d, &["augment", "--input", "dirty.jsonl", "--out-dir", "aug", "--set", "id=\"x\""]);
    assert_eq!(aug["counts"]["total"], 15 * 60);
    let aug9 = ok(
        d,
        &["augment", "--input", "dirty.jsonl", "--out-dir", "aug9", "--set", "augment.include_neutrals=false"],
    );
    assert_eq!(aug9["counts"]["total"], 9 * 60);

    let rm = ok(d, &["train-rm", "--preferences", "dirty.jsonl", "--set", "rm_train.epochs=10", "--out", "rm.json"]);
    assert_eq!(rm["n_train"], 60);
    ok(d, &["train-rm", "--rrm", "--candidates", "aug/x.augmented.jsonl", "--set", "rrm_train.epochs=10", "--out", "rrm.json"]);
    let ev = ok(d, &["eval-rm", "--model", "rrm.json", "--candidates", "aug/x.augmented.jsonl"]);
    assert_eq!(ev["n"], 900);
    assert_eq!(ev["ties"], 360);

    let f = ok(
        d,
        &["filter", "--candidates", "aug/x.augmented.jsonl", "--model", "rm.json", "--set", "filter.threshold=1.1", "--out", "f.jsonl"],
    );
    assert_eq!(f["kept"], 0);
    assert_eq!(fs::read_to_string(d.join("f.jsonl")).unwrap().lines().count(), 60);

    ok(d, &["synth", "--kind", "pools", "--set", "curve.prompts=30", "--out", "pools.jsonl"]);
    let bon = rrm(d, &["bon", "--model", "rm.json", "--pools", "pools.jsonl", "--n", "4"]);
    assert!(bon.status.success());
    assert_eq!(String::from_utf8(bon.stdout).unwrap().lines().count(), 30);
    let dpo = ok(d, &["dpo", "--model", "rm.json", "--pools", "pools.jsonl", "--set", "dpo.train.epochs=5", "--out", "pol.jsonl"]);
    assert_eq!(dpo["pairs"], 30);
    let curve = rrm(d, &["curve", "--model", "rm.json", "--pools", "pools.jsonl", "--preset", "sure-prefix"]);
    let table = String::from_utf8(curve.stdout).unwrap();
    assert_eq!(table.lines().next().unwrap(), "n\trate\tproportion\tcount\thalf_width");
    assert_eq!(table.lines().count(), 5);
    let stats = rrm(d, &["stats", "--preferences", "corpus.jsonl"]);
    assert!(String::from_utf8(stats.stdout).unwrap().starts_with("n\tmean_chosen"));
}

#[test]
fn run_is_reproducible_and_logs_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), "protocol = \"prop1\"\nid = \"p1\"\n[prop1]\nn = 3000\n").unwrap();
    let args = ["run", "--config", "exp.toml", "--set", "prop1.n=2000", "--out-dir", "b"];
    let first = rrm(d, &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let m1 = fs::read(d.join("b/p1.manifest.json")).unwrap();
    let gap1 = fs::read(d.join("b/p1.likelihood_gap.tsv")).unwrap();
    assert!(rrm(d, &args).status.success());
    assert_eq!(fs::read(d.join("b/p1.manifest.json")).unwrap(), m1);
    assert_eq!(fs::read(d.join("b/p1.likelihood_gap.tsv")).unwrap(), gap1);
    let manifest: serde_json::Value = serde_json::from_slice(&m1).unwrap();
    assert_eq!(manifest["overrides"][0], "prop1.n=2000");
    let cfg = fs::read_to_string(d.join("b/p1.config.toml")).unwrap();
    assert!(cfg.contains("n = 2000"));
}

#[test]
fn jobs_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "text", "--set", "text.n=40", "--out", "c.jsonl"]);
    ok(d, &["--jobs", "1", "augment", "--input", "c.jsonl", "--out-dir", "one"]);
    ok(d, &["--jobs", "4", "augment", "--input", "c.jsonl", "--out-dir", "four"]);
    assert_eq!(
        fs::read(d.join("one/prop2.augmented.jsonl")).unwrap(),
        fs::read(d.join("four/prop2.augmented.jsonl")).unwrap()
    );
}
