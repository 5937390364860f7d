//! Experiment configuration. Every random operation draws from a seed named
//! here; protocol defaults are filled in before user values are applied.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augmenter::FilterDirection;
use crate::injector::{ArtifactKind, ArtifactSpec};
use crate::metrics::ReportFormat;
use crate::policyeval::{BonRule, DEFAULT_BETA, DEFAULT_RATES};
use crate::rewardnet::{ModelKind, TrainConfig};
use crate::synthlab::text::TextCorpusConfig;
use crate::synthlab::{CausalConfig, Coupling};

use super::ExperimentError;

pub const PROTOCOLS: [&str; 6] = [
    "prop1",
    "prop2",
    "artifact-curve",
    "mixed-artifact",
    "length-analysis",
    "dpo-toy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub permutation: u64,
    pub augment: u64,
    pub filter: u64,
    pub injection: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            permutation: 1,
            augment: 2,
            filter: 3,
            injection: 4,
            eval: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSettings {
    pub include_neutrals: bool,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings { include_neutrals: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub enabled: bool,
    pub threshold: f64,
    pub sample_fraction: f64,
    pub direction: FilterDirection,
    /// Scorer checkpoint; when absent the RM trained on the originals scores.
    pub model: Option<PathBuf>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            enabled: false,
            threshold: 0.2,
            sample_fraction: 0.5,
            direction: FilterDirection::KeepHard,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Settings {
    pub n: usize,
    pub beta_s: f64,
    pub alpha: f64,
    pub sigma_s: f64,
    pub beta_as: f64,
    pub alpha_a: f64,
    /// Artifact noise for the independent-coupling comparison.
    pub independent_sigma_a: f64,
}

impl Default for Prop1Settings {
    fn default() -> Self {
        Prop1Settings {
            n: 100_000,
            beta_s: 1.5,
            alpha: -0.25,
            sigma_s: 0.5,
            beta_as: 2.0,
            alpha_a: 1.0,
            independent_sigma_a: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub strata: usize,
    pub per_stratum: usize,
    pub artifact_noise: f64,
    pub delta: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            strata: 200,
            per_stratum: 400,
            artifact_noise: 0.5,
            delta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSettings {
    pub rates: Vec<f64>,
    pub ns: Vec<usize>,
    pub prompts: usize,
    /// Artifact injected at evaluation; defaults to the last training artifact.
    pub artifact: Option<ArtifactKind>,
    pub rule: BonRule,
}

impl Default for CurveSettings {
    fn default() -> Self {
        CurveSettings {
            rates: DEFAULT_RATES.to_vec(),
            ns: vec![8],
            prompts: 2000,
            artifact: None,
            rule: BonRule::TotalWin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoSettings {
    pub beta: f64,
    pub prompts: usize,
    pub candidates: usize,
    /// Artifact injection rate into the policy's candidate responses.
    pub rate: f64,
    pub train: TrainConfig,
}

impl Default for DpoSettings {
    fn default() -> Self {
        DpoSettings {
            beta: DEFAULT_BETA,
            prompts: 500,
            candidates: 8,
            rate: 0.2,
            train: TrainConfig {
                learning_rate: 1.0,
                epochs: 100,
                batch_size: 1,
                seed: 6,
                l2: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub protocol: String,
    pub output_dir: PathBuf,
    /// Preference files; used by `augment` and `length-analysis`.
    pub inputs: Vec<PathBuf>,
    pub format: ReportFormat,
    pub model_kind: ModelKind,
    pub seeds: Seeds,
    pub augment: AugmentSettings,
    pub filter: FilterSettings,
    pub rm_train: TrainConfig,
    pub rrm_train: TrainConfig,
    pub causal: CausalConfig,
    pub prop1: Prop1Settings,
    pub probes: ProbeSettings,
    pub text: TextCorpusConfig,
    /// Training-set corruption, applied to chosen responses in order.
    pub artifacts: Vec<ArtifactSpec>,
    pub curve: CurveSettings,
    pub dpo: DpoSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_protocol("prop2").expect("known protocol")
    }
}

fn preset(name: &str, p: f64) -> ArtifactSpec {
    ArtifactSpec::preset(name, p).expect("builtin preset")
}

impl ExperimentConfig {
    /// Defaults for a named protocol.
    pub fn for_protocol(protocol: &str) -> Result<Self, ExperimentError> {
        if !PROTOCOLS.contains(&protocol) {
            return Err(ExperimentError::UnknownProtocol(protocol.to_string()));
        }
        let mut cfg = ExperimentConfig {
            id: protocol.to_string(),
            protocol: protocol.to_string(),
            output_dir: PathBuf::from("out"),
            inputs: Vec::new(),
            format: ReportFormat::Tsv,
            model_kind: ModelKind::PairwiseRanker,
            seeds: Seeds::default(),
            augment: AugmentSettings::default(),
            filter: FilterSettings::default(),
            rm_train: TrainConfig {
                seed: 7,
                ..TrainConfig::default()
            },
            rrm_train: TrainConfig {
                seed: 8,
                ..TrainConfig::default()
            },
            causal: CausalConfig {
                beta_s: 2.0,
                beta_a: 2.0,
                alpha: 0.0,
                sigma_s: 0.0,
                sigma_a: 0.0,
                coupling: Coupling::Independent,
                n: 20_000,
                seed: 0,
                ..CausalConfig::default()
            },
            prop1: Prop1Settings::default(),
            probes: ProbeSettings::default(),
            text: TextCorpusConfig {
                n: 4000,
                ..TextCorpusConfig::default()
            },
            artifacts: Vec::new(),
            curve: CurveSettings::default(),
            dpo: DpoSettings::default(),
        };
        match protocol {
            "artifact-curve" | "dpo-toy" => cfg.artifacts = vec![preset("sure-prefix", 0.1)],
            "mixed-artifact" => {
                cfg.artifacts = vec![preset("bold-wrap", 0.1), preset("emoji-append", 0.1)];
                cfg.curve.ns = vec![8, 64];
            }
            "length-analysis" => cfg.text.chosen_longer = Some(0.6),
            _ => {}
        }
        Ok(cfg)
    }

    /// Parse TOML over protocol defaults, then apply `key=value` overrides in
    /// order (last wins). Returns the config and the applied overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<(Self, Vec<String>), ExperimentError> {
        let mut user: toml::Table =
            toml::from_str(text).map_err(|e| ExperimentError::Config(format!("config parse error: {e}")))?;
        let mut applied = Vec::with_capacity(overrides.len());
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("override {ov:?} is not key=value")))?;
            set_path(&mut user, key.trim(), parse_override_value(raw.trim()))?;
            applied.push(format!("{}={}", key.trim(), raw.trim()));
        }
        let protocol = match user.get("protocol") {
            Some(toml::Value::String(p)) => p.clone(),
            Some(_) => return Err(ExperimentError::Config("protocol must be a string".into())),
            None => "prop2".to_string(),
        };
        let base = Self::for_protocol(&protocol)?;
        let toml::Value::Table(mut merged) =
            toml::Value::try_from(&base).map_err(|e| ExperimentError::Config(e.to_string()))?
        else {
            unreachable!("a struct serializes to a table")
        };
        merge_tables(&mut merged, user);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| ExperimentError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok((cfg, applied))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return bad(format!("id {:?} must be a non-empty file-name fragment", self.id));
        }
        if !PROTOCOLS.contains(&self.protocol.as_str()) {
            return Err(ExperimentError::UnknownProtocol(self.protocol.clone()));
        }
        for (name, t) in [("rm_train", &self.rm_train), ("rrm_train", &self.rrm_train), ("dpo.train", &self.dpo.train)] {
            t.validate().map_err(|e| ExperimentError::Config(format!("{name}: {e}")))?;
        }
        self.causal.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.text.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        for a in &self.artifacts {
            a.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if !(self.filter.threshold.is_finite() && (0.0..=1.0).contains(&self.filter.sample_fraction)) {
            return bad("filter needs a finite threshold and sample_fraction in [0, 1]".into());
        }
        if let Some(r) = self.curve.rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("curve rate {r} outside [0, 1)"));
        }
        if self.curve.ns.iter().any(|&n| n < 2) {
            return bad("best-of-N sizes must be at least 2".into());
        }
        if self.dpo.candidates < 2 || !(0.0..1.0).contains(&self.dpo.rate) {
            return bad("dpo needs at least 2 candidates and a rate in [0, 1)".into());
        }
        if self.probes.strata < 2 || self.probes.per_stratum < 2 {
            return bad("probes need at least 2 strata of at least 2 instances".into());
        }
        Ok(())
    }

    /// Every named seed, for the manifest.
    pub fn named_seeds(&self) -> Vec<(String, u64)> {
        vec![
            ("seeds.permutation".into(), self.seeds.permutation),
            ("seeds.augment".into(), self.seeds.augment),
            ("seeds.filter".into(), self.seeds.filter),
            ("seeds.injection".into(), self.seeds.injection),
            ("seeds.eval".into(), self.seeds.eval),
            ("rm_train.seed".into(), self.rm_train.seed),
            ("rrm_train.seed".into(), self.rrm_train.seed),
            ("causal.seed".into(), self.causal.seed),
            ("text.seed".into(), self.text.seed),
            ("dpo.train.seed".into(), self.dpo.train.seed),
        ]
    }
}

/// Override values are parsed as TOML literals, falling back to bare strings.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ExperimentError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(ExperimentError::Config(format!("empty override key {key:?}")));
    };
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
