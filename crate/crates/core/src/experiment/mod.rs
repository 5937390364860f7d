//! Configured pipelines and report bundles.
//!
//! A run writes its report files plus `{id}.config.toml` (the resolved
//! config) and `{id}.manifest.json` into the output directory. Nothing in a
//! bundle depends on wall-clock time, so equal configs give byte-identical
//! bundles.

pub mod config;
pub mod protocols;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augmenter::{merge, write_candidates, AugmentError};
use crate::corpus::{load_preferences, CorpusError};
use crate::injector::ArtifactError;
use crate::metrics::{emit_report, report_path, MetricsError, Record, Report, Value};
use crate::policyeval::PolicyError;
use crate::rewardnet::{Featurizer, ModelError, RewardModel};
use crate::synthlab::SynthError;

pub use config::{ExperimentConfig, PROTOCOLS};
pub use protocols::ProvenanceCounts;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error("unknown protocol {name:?}; valid protocols: {}", PROTOCOLS.join(", "), name = .0)]
    UnknownProtocol(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<ExperimentError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// 1 usage or config error, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::UnknownProtocol(_) => 1,
            ExperimentError::Stage { source, .. } => source.exit_code(),
            ExperimentError::Model(ModelError::NonFiniteLoss { .. })
            | ExperimentError::Policy(PolicyError::NonFiniteLoss { .. }) => 3,
            ExperimentError::Model(ModelError::Config(_))
            | ExperimentError::Policy(PolicyError::Config(_))
            | ExperimentError::Synth(SynthError::Config(_))
            | ExperimentError::Artifact(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Attach a stage name to module errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, ExperimentError>;
}

impl<T, E: Into<ExperimentError>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, ExperimentError> {
        self.map_err(|e| ExperimentError::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the resolved config in canonical TOML form.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(cfg.to_toml().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestFile {
    pub stage: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub id: String,
    pub protocol: String,
    pub config_hash: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub overrides: Vec<String>,
    pub files: Vec<ManifestFile>,
}

/// Report files collected for one run.
pub struct Bundle {
    dir: PathBuf,
    id: String,
    format: crate::metrics::ReportFormat,
    files: Vec<ManifestFile>,
}

impl Bundle {
    pub fn create(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        fs::create_dir_all(&cfg.output_dir).map_err(|e| ExperimentError::io(&cfg.output_dir, e))?;
        Ok(Bundle {
            dir: cfg.output_dir.clone(),
            id: cfg.id.clone(),
            format: cfg.format,
            files: Vec::new(),
        })
    }

    fn record(&mut self, stage: &str, path: &Path) -> Result<(), ExperimentError> {
        let bytes = fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
        self.files.push(ManifestFile {
            stage: stage.to_string(),
            path: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn report(&mut self, metric: &str, report: &Report) -> Result<PathBuf, ExperimentError> {
        let path = report_path(&self.dir, &self.id, metric, self.format);
        emit_report(report, &path, self.format).stage("report")?;
        self.record(metric, &path)?;
        Ok(path)
    }

    pub fn rows<T: Serialize>(&mut self, metric: &str, rows: &[T]) -> Result<PathBuf, ExperimentError> {
        let r = Report::from_serializable(metric, rows).stage("report")?;
        self.report(metric, &r)
    }

    /// Write an auxiliary file named `{id}.{name}`.
    pub fn file(&mut self, stage: &str, name: &str, bytes: &[u8]) -> Result<PathBuf, ExperimentError> {
        let path = self.dir.join(format!("{}.{name}", self.id));
        fs::write(&path, bytes).map_err(|e| ExperimentError::io(&path, e))?;
        self.record(stage, &path)?;
        Ok(path)
    }

    pub fn finish(mut self, cfg: &ExperimentConfig, overrides: &[String]) -> Result<RunSummary, ExperimentError> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            id: cfg.id.clone(),
            protocol: cfg.protocol.clone(),
            config_hash: config_hash(cfg),
            seeds: cfg.named_seeds().into_iter().collect(),
            overrides: overrides.to_vec(),
            files: self.files.clone(),
        };
        let path = self.dir.join(format!("{}.manifest.json", self.id));
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| ExperimentError::io(&path, e))?;
        Ok(RunSummary {
            manifest: path,
            files: self.files.into_iter().map(|f| self.dir.join(f.path)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: PathBuf,
    pub files: Vec<PathBuf>,
}

fn counts_report(name: &str, c: &ProvenanceCounts) -> Report {
    let mut row = Record::new();
    row.insert("original".into(), Value::Int(c.original as i64));
    row.insert("non_contextual".into(), Value::Int(c.non_contextual as i64));
    row.insert("neutral".into(), Value::Int(c.neutral as i64));
    row.insert("total".into(), Value::Int(c.total as i64));
    Report::new(name, vec![row])
}

/// Run the configured protocol and write its bundle.
pub fn run_experiment(cfg: &ExperimentConfig, overrides: &[String]) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    let mut b = Bundle::create(cfg)?;
    b.file("config", "config.toml", cfg.to_toml().as_bytes())?;
    match cfg.protocol.as_str() {
        "prop1" => {
            let rows = protocols::prop1(cfg)?;
            b.rows("likelihood_gap", &rows)?;
        }
        "prop2" => {
            let out = protocols::prop2(cfg)?;
            b.rows("sensitivity", &[out.rm, out.rrm])?;
            b.report("training_counts", &counts_report("training_counts", &out.counts))?;
        }
        "artifact-curve" | "mixed-artifact" => {
            let out = protocols::artifact_curves(cfg)?;
            b.rows("artifact_curve", &out.points)?;
            b.report("training_counts", &counts_report("training_counts", &out.counts))?;
        }
        "length-analysis" => {
            let out = protocols::length_analysis(cfg)?;
            for (name, rep) in &out.reports {
                b.report(&format!("length_{name}"), &rep.summary(name))?;
                b.report(&format!("length_hist_{name}"), &rep.histogram(name))?;
            }
        }
        "dpo-toy" => {
            let rows = protocols::dpo_toy(cfg)?;
            b.rows("dpo_policy", &rows)?;
        }
        other => return Err(ExperimentError::UnknownProtocol(other.to_string())),
    }
    b.finish(cfg, overrides)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentSummary {
    pub counts: ProvenanceCounts,
    /// Candidates scored by the difficulty filter, when it ran.
    pub scored: Option<usize>,
    pub output: PathBuf,
}

/// Load `cfg.inputs[0]`, expand, augment, optionally filter and merge. The
/// merged candidates go to `{output_dir}/{id}.augmented.jsonl` and the
/// counts to a `training_counts` report.
pub fn run_augment(cfg: &ExperimentConfig, featurizer: &Featurizer) -> Result<AugmentSummary, ExperimentError> {
    cfg.validate()?;
    let input = cfg
        .inputs
        .first()
        .ok_or_else(|| ExperimentError::Config("augment needs an input file".into()))?;
    let examples = load_preferences(input).stage("load")?;
    let sets = if cfg.filter.enabled {
        let scorer = match &cfg.filter.model {
            Some(p) => RewardModel::load(p).stage("filter")?.0,
            None => {
                let aug = crate::augmenter::Augmenter {
                    seed: cfg.seeds.augment,
                    include_neutrals: cfg.augment.include_neutrals,
                };
                let originals: Vec<_> = examples.iter().map(|e| aug.original(e)).collect();
                let init = RewardModel::new(cfg.model_kind, featurizer.clone());
                crate::rewardnet::train(&init, &originals, &cfg.rm_train).stage("train-rm")?.0
            }
        };
        protocols::augment_examples(cfg, examples, Some(&scorer))?
    } else {
        protocols::augment_examples(cfg, examples, None)?
    };
    let scored = sets.scored;
    let all = merge(sets.originals, sets.augmented);
    let counts = ProvenanceCounts::of(&all);
    let mut buf = Vec::new();
    write_candidates(&mut buf, &all).map_err(|e| ExperimentError::io(&cfg.output_dir, e))?;
    let mut b = Bundle::create(cfg)?;
    let output = b.file("augment", "augmented.jsonl", &buf)?;
    b.report("training_counts", &counts_report("training_counts", &counts))?;
    Ok(AugmentSummary { counts, scored, output })
}
