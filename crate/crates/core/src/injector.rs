//! Context-free artifact injection and anchored detection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PreferenceExample;
use crate::util::{stable_hash_str, unit_from_hash};

pub const SURE_PREFIX: &str = "Sure, here is the response: ";
pub const EMOJI_SUFFIX: &str = " \u{1F60A}";
pub const BOLD_MARKER: &str = "**";

#[derive(Debug, Error, PartialEq)]
pub enum ArtifactError {
    #[error("artifact probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("artifact marker text must be non-empty")]
    EmptyMarker,
    #[error("unknown artifact preset {0:?} (expected sure-prefix, emoji-append or bold-wrap)")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArtifactKind {
    Prefix { text: String },
    Suffix { text: String },
    Wrap { open: String, close: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub probability: f64,
}

impl ArtifactSpec {
    pub fn new(kind: ArtifactKind, probability: f64) -> Result<Self, ArtifactError> {
        let spec = ArtifactSpec { kind, probability };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ArtifactError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(ArtifactError::Probability(self.probability));
        }
        let empty = match &self.kind {
            ArtifactKind::Prefix { text } | ArtifactKind::Suffix { text } => text.is_empty(),
            ArtifactKind::Wrap { open, close } => open.is_empty() || close.is_empty(),
        };
        if empty {
            return Err(ArtifactError::EmptyMarker);
        }
        Ok(())
    }

    pub fn prefix(text: &str, probability: f64) -> Result<Self, ArtifactError> {
        Self::new(ArtifactKind::Prefix { text: text.to_string() }, probability)
    }

    pub fn suffix(text: &str, probability: f64) -> Result<Self, ArtifactError> {
        Self::new(ArtifactKind::Suffix { text: text.to_string() }, probability)
    }

    pub fn wrap(open: &str, close: &str, probability: f64) -> Result<Self, ArtifactError> {
        Self::new(
            ArtifactKind::Wrap {
                open: open.to_string(),
                close: close.to_string(),
            },
            probability,
        )
    }

    /// Named presets: `sure-prefix`, `emoji-append`, `bold-wrap`.
    pub fn preset(name: &str, probability: f64) -> Result<Self, ArtifactError> {
        match name {
            "sure-prefix" => Self::prefix(SURE_PREFIX, probability),
            "emoji-append" => Self::suffix(EMOJI_SUFFIX, probability),
            "bold-wrap" => Self::wrap(BOLD_MARKER, BOLD_MARKER, probability),
            other => Err(ArtifactError::UnknownPreset(other.to_string())),
        }
    }

    pub fn with_probability(&self, probability: f64) -> Result<Self, ArtifactError> {
        Self::new(self.kind.clone(), probability)
    }

    /// Short stable name, used for feature names and coin hashing.
    pub fn label(&self) -> String {
        match &self.kind {
            ArtifactKind::Prefix { text } => format!("prefix:{text}"),
            ArtifactKind::Suffix { text } => format!("suffix:{text}"),
            ArtifactKind::Wrap { open, close } => format!("wrap:{open}|{close}"),
        }
    }

    /// Apply the transformation unconditionally.
    pub fn apply(&self, response: &str) -> String {
        match &self.kind {
            ArtifactKind::Prefix { text } => format!("{text}{response}"),
            ArtifactKind::Suffix { text } => format!("{response}{text}"),
            ArtifactKind::Wrap { open, close } => format!("{open}{response}{close}"),
        }
    }
}

/// Apply `spec` when `coin < spec.probability`; `coin` is a uniform draw in [0, 1).
/// Repeated injection stacks.
pub fn inject(response: &str, spec: &ArtifactSpec, coin: f64) -> String {
    if coin < spec.probability {
        spec.apply(response)
    } else {
        response.to_string()
    }
}

/// Anchored signature match: prefix at the start, suffix at the end, wrap at both.
pub fn detect(response: &str, spec: &ArtifactSpec) -> bool {
    match &spec.kind {
        ArtifactKind::Prefix { text } => response.starts_with(text.as_str()),
        ArtifactKind::Suffix { text } => response.ends_with(text.as_str()),
        ArtifactKind::Wrap { open, close } => {
            response.len() >= open.len() + close.len()
                && response.starts_with(open.as_str())
                && response.ends_with(close.as_str())
        }
    }
}

/// Remove one detected layer of the artifact; `None` when absent.
pub fn strip<'a>(response: &'a str, spec: &ArtifactSpec) -> Option<&'a str> {
    if !detect(response, spec) {
        return None;
    }
    Some(match &spec.kind {
        ArtifactKind::Prefix { text } => &response[text.len()..],
        ArtifactKind::Suffix { text } => &response[..response.len() - text.len()],
        ArtifactKind::Wrap { open, close } => &response[open.len()..response.len() - close.len()],
    })
}

/// Peel every registered artifact, in any nesting order, until none is left.
pub fn strip_all<'a>(mut response: &'a str, specs: &[ArtifactSpec]) -> &'a str {
    while let Some(inner) = specs.iter().find_map(|s| strip(response, s)) {
        response = inner;
    }
    response
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Chosen,
    Rejected,
    Both,
}

impl Side {
    fn tag(self) -> &'static str {
        match self {
            Side::Chosen => "chosen",
            Side::Rejected => "rejected",
            Side::Both => "both",
        }
    }
}

/// Per-example coin keyed on (seed, example id, spec, side), so the
/// corruption pattern does not depend on dataset order.
pub fn example_coin(seed: u64, example_id: &str, spec: &ArtifactSpec, side: &str) -> f64 {
    unit_from_hash(stable_hash_str(
        seed,
        &["inject", example_id, &spec.label(), side],
    ))
}

/// Inject `spec` into the selected side(s). Returns the dataset and the
/// number of examples that received at least one injection.
pub fn corrupt_dataset(
    dataset: &[PreferenceExample],
    spec: &ArtifactSpec,
    side: Side,
    seed: u64,
) -> (Vec<PreferenceExample>, usize) {
    let mut affected = 0;
    let out = dataset
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            let mut hit = false;
            if matches!(side, Side::Chosen | Side::Both) {
                let coin = example_coin(seed, &ex.id, spec, Side::Chosen.tag());
                if coin < spec.probability {
                    ex.chosen = spec.apply(&ex.chosen);
                    hit = true;
                }
            }
            if matches!(side, Side::Rejected | Side::Both) {
                let coin = example_coin(seed, &ex.id, spec, Side::Rejected.tag());
                if coin < spec.probability {
                    ex.rejected = spec.apply(&ex.rejected);
                    hit = true;
                }
            }
            if hit {
                affected += 1;
            }
            ex
        })
        .collect();
    (out, affected)
}
