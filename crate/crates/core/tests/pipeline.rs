use std::fs;

use proptest::prelude::*;

use rrm_core::augmenter::{read_candidates, Provenance};
use rrm_core::corpus::{parse_preferences, save_preferences, write_preferences, PreferenceExample};
use rrm_core::experiment::config::ExperimentConfig;
use rrm_core::experiment::{run_augment, run_experiment};
use rrm_core::metrics::parse_jsonl_report;
use rrm_core::rewardnet::Featurizer;
use rrm_core::synthlab::text::{generate_corpus, TextCorpusConfig};

fn corpus(n: usize) -> Vec<PreferenceExample> {
    generate_corpus(&TextCorpusConfig {
        n,
        seed: 3,
        ..TextCorpusConfig::default()
    })
    .unwrap()
}

fn augment_config(dir: &std::path::Path, extra: &[&str]) -> ExperimentConfig {
    let input = dir.join("prefs.jsonl");
    save_preferences(&input, &corpus(40)).unwrap();
    let mut ov = vec![
        format!("inputs=[\"{}\"]", input.display()),
        format!("output_dir=\"{}\"", dir.join("out").display()),
        "id=\"aug\"".to_string(),
        "rm_train.epochs=5".to_string(),
    ];
    ov.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_toml("", &ov).unwrap().0
}

#[test]
fn augment_yields_fifteen_per_example() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_augment(&augment_config(dir.path(), &[]), &Featurizer::default()).unwrap();
    assert_eq!(s.counts.total, 15 * 40);
    assert_eq!((s.counts.original, s.counts.non_contextual, s.counts.neutral), (40, 320, 240));
    let back = read_candidates(std::io::BufReader::new(fs::File::open(&s.output).unwrap())).unwrap();
    assert_eq!(back.len(), 600);
    assert!(back[..40].iter().all(|c| c.provenance == Provenance::Original));
}

#[test]
fn augment_without_neutrals_yields_nine_per_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = augment_config(dir.path(), &["augment.include_neutrals=false"]);
    let s = run_augment(&cfg, &Featurizer::default()).unwrap();
    assert_eq!(s.counts.total, 9 * 40);
    assert_eq!(s.counts.neutral, 0);
}

#[test]
fn impossible_filter_gap_keeps_only_originals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = augment_config(dir.path(), &["filter.enabled=true", "filter.threshold=1.1"]);
    let s = run_augment(&cfg, &Featurizer::default()).unwrap();
    assert_eq!(s.counts.total, 40);
    assert_eq!(s.counts.original, 40);
    assert_eq!(s.scored, Some(280));
}

#[test]
fn prop1_bundle_has_manifest_and_gap_file() {
    let dir = tempfile::tempdir().unwrap();
    let ov = [
        "protocol=\"prop1\"".to_string(),
        "prop1.n=2000".to_string(),
        format!("output_dir=\"{}\"", dir.path().display()),
    ];
    let (cfg, applied) = ExperimentConfig::from_toml("", &ov).unwrap();
    let s = run_experiment(&cfg, &applied).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&s.manifest).unwrap()).unwrap();
    assert_eq!(manifest["protocol"], "prop1");
    assert_eq!(manifest["overrides"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(dir.path().join("prop1.likelihood_gap.tsv").exists());
    let tsv = fs::read_to_string(dir.path().join("prop1.likelihood_gap.tsv")).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "coupling\tn\tgap");
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn identical_configs_give_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let ov = [
        "protocol=\"prop1\"".to_string(),
        "prop1.n=500".to_string(),
        format!("output_dir=\"{}\"", dir.path().display()),
    ];
    let (cfg, applied) = ExperimentConfig::from_toml("", &ov).unwrap();
    let a = fs::read(run_experiment(&cfg, &applied).unwrap().manifest).unwrap();
    let b = fs::read(run_experiment(&cfg, &applied).unwrap().manifest).unwrap();
    assert_eq!(a, b);
}

#[test]
fn artifact_curve_has_one_row_per_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ov = [
        "protocol=\"artifact-curve\"".to_string(),
        "text.n=300".to_string(),
        "curve.prompts=100".to_string(),
        "curve.rates=[0.05, 0.3]".to_string(),
        "format=\"jsonl\"".to_string(),
        format!("output_dir=\"{}\"", dir.path().display()),
    ];
    let (cfg, applied) = ExperimentConfig::from_toml("", &ov).unwrap();
    run_experiment(&cfg, &applied).unwrap();
    let f = fs::File::open(dir.path().join("artifact-curve.artifact_curve.jsonl")).unwrap();
    let r = parse_jsonl_report(std::io::BufReader::new(f)).unwrap();
    // two models, one N
    assert_eq!(r.rows.len(), 4);
    let rates: Vec<String> = r.rows.iter().map(|row| format!("{:?}", row["rate"])).collect();
    assert_eq!(rates[0], rates[2]);
    assert_eq!(rates[1], rates[3]);
}

fn text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-z\u{e9}][a-z \"\\\\\n\u{e9}\u{1f60a}]{0,20}").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn preference_files_round_trip(rows in proptest::collection::vec((text(), text(), text()), 1..20)) {
        let data: Vec<PreferenceExample> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (p, w, l))| PreferenceExample::new(format!("id{i}"), p, w, l))
            .collect();
        let mut buf = Vec::new();
        write_preferences(&mut buf, &data).unwrap();
        let back = parse_preferences(buf.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }
}
