//! Explicit feature maps for the linear reward models.
//!
//! Every featurizer has a pointwise map `phi(x, y)` used by Bradley-Terry
//! models and a pairwise map built from two pointwise vectors. Pairwise
//! features are odd in the response order (optionally plus a constant
//! position feature), which is what makes the symmetrized ranker a
//! logistic model in its parameters.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::injector::{detect, strip_all, ArtifactSpec};
use crate::util::{dot, mean, stable_hash_str, token_count};

pub const CONTEXTUAL_FEATURE: &str = "contextual_signal";
pub const ARTIFACT_FEATURE: &str = "artifact";
pub const POSITION_FEATURE: &str = "position";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>) -> Self {
        FeatureSchema { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A feature vector tied to its schema. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema: Arc<FeatureSchema>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, schema: Arc<FeatureSchema>) -> Result<Self, ModelError> {
        if values.len() != schema.len() {
            return Err(ModelError::Dimension {
                expected: schema.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature(schema.names[i].clone()));
        }
        Ok(FeatureVector { values, schema })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.schema.index_of(name).map(|i| self.values[i])
    }
}

/// Lowercased tokens with surrounding punctuation stripped; empty tokens dropped.
pub fn content_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Features over raw text: response length, prompt-response token overlap,
/// one anchored indicator per registered artifact, and hashed buckets of
/// the response tokens shared with the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextFeaturizer {
    pub artifacts: Vec<ArtifactSpec>,
    pub hash_buckets: usize,
    /// Token count is divided by this before use.
    pub length_scale: f64,
    #[serde(default)]
    pub position_bias: bool,
}

impl Default for TextFeaturizer {
    fn default() -> Self {
        TextFeaturizer {
            artifacts: ["sure-prefix", "emoji-append", "bold-wrap"]
                .iter()
                .map(|n| ArtifactSpec::preset(n, 1.0).expect("builtin preset"))
                .collect(),
            hash_buckets: 8,
            length_scale: 100.0,
            position_bias: false,
        }
    }
}

impl TextFeaturizer {
    pub fn point_names(&self) -> Vec<String> {
        let mut names = vec!["length".to_string(), "overlap".to_string()];
        names.extend(self.artifacts.iter().map(|a| format!("artifact:{}", a.label())));
        names.extend((0..self.hash_buckets).map(|k| format!("shared_bow:{k}")));
        names
    }

    pub fn point(&self, prompt: &str, response: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 + self.artifacts.len() + self.hash_buckets);
        // content features ignore registered markup; only the indicators see it
        let content = strip_all(response, &self.artifacts);
        out.push(token_count(content) as f64 / self.length_scale);
        let prompt_vocab: HashSet<String> = content_tokens(prompt).into_iter().collect();
        let toks = content_tokens(content);
        let denom = toks.len().max(1) as f64;
        let shared: Vec<&String> = toks.iter().filter(|t| prompt_vocab.contains(*t)).collect();
        out.push(shared.len() as f64 / denom);
        out.extend(
            self.artifacts
                .iter()
                .map(|a| if detect(response, a) { 1.0 } else { 0.0 }),
        );
        let base = out.len();
        out.resize(base + self.hash_buckets, 0.0);
        if self.hash_buckets > 0 {
            for t in shared {
                let b = (stable_hash_str(0, &["bow", t]) % self.hash_buckets as u64) as usize;
                out[base + b] += 1.0 / denom;
            }
        }
        out
    }
}

/// Features over synthetic vector-encoded texts (whitespace-separated
/// floats). Pointwise: alignment `<x, y>` and level `mean(y)`. Pairwise:
/// `tanh` of the alignment difference (the contextual signal) and the
/// level difference (the artifact).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFeaturizer {
    #[serde(default)]
    pub position_bias: bool,
}

pub fn parse_vector(text: &str) -> Result<Vec<f64>, ModelError> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| ModelError::Encoding(format!("not a number: {t:?}")))
        })
        .collect()
}

pub fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl SyntheticFeaturizer {
    pub fn point(&self, prompt: &str, response: &str) -> Result<Vec<f64>, ModelError> {
        let x = parse_vector(prompt)?;
        let y = parse_vector(response)?;
        if x.len() != y.len() || x.is_empty() {
            return Err(ModelError::Encoding(format!(
                "prompt has {} coordinates, response has {}",
                x.len(),
                y.len()
            )));
        }
        Ok(vec![dot(&x, &y), mean(&y)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Featurizer {
    Text(TextFeaturizer),
    Synthetic(SyntheticFeaturizer),
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer::Text(TextFeaturizer::default())
    }
}

impl Featurizer {
    pub fn synthetic() -> Self {
        Featurizer::Synthetic(SyntheticFeaturizer::default())
    }

    fn position_bias(&self) -> bool {
        match self {
            Featurizer::Text(t) => t.position_bias,
            Featurizer::Synthetic(s) => s.position_bias,
        }
    }

    pub fn point_schema(&self) -> FeatureSchema {
        match self {
            Featurizer::Text(t) => FeatureSchema::new(t.point_names()),
            Featurizer::Synthetic(_) => {
                FeatureSchema::new(vec!["prompt_alignment".into(), "mean_level".into()])
            }
        }
    }

    pub fn pair_schema(&self) -> FeatureSchema {
        let mut names = match self {
            Featurizer::Text(t) => t.point_names(),
            Featurizer::Synthetic(_) => {
                vec![CONTEXTUAL_FEATURE.to_string(), ARTIFACT_FEATURE.to_string()]
            }
        };
        if self.position_bias() {
            names.push(POSITION_FEATURE.to_string());
        }
        FeatureSchema::new(names)
    }

    pub fn point(&self, prompt: &str, response: &str) -> Result<Vec<f64>, ModelError> {
        match self {
            Featurizer::Text(t) => Ok(t.point(prompt, response)),
            Featurizer::Synthetic(s) => s.point(prompt, response),
        }
    }

    /// Pointwise features as a schema-tagged vector.
    pub fn featurize(&self, prompt: &str, response: &str) -> Result<FeatureVector, ModelError> {
        FeatureVector::new(self.point(prompt, response)?, Arc::new(self.point_schema()))
    }

    /// Directional pair features from two pointwise vectors.
    pub fn pair_from_points(&self, p1: &[f64], p2: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = match self {
            Featurizer::Text(_) => p1.iter().zip(p2).map(|(a, b)| a - b).collect(),
            Featurizer::Synthetic(_) => vec![(p1[0] - p2[0]).tanh(), p1[1] - p2[1]],
        };
        if self.position_bias() {
            out.push(1.0);
        }
        out
    }

    /// Forward and reverse pair features from stored latent (S, A) values.
    /// Only defined for the synthetic featurizer.
    pub fn pair_from_latent(&self, s: f64, a: f64) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        match self {
            Featurizer::Synthetic(_) => {
                let mut fwd = vec![s, a];
                let mut rev = vec![-s, -a];
                if self.position_bias() {
                    fwd.push(1.0);
                    rev.push(1.0);
                }
                Ok((fwd, rev))
            }
            Featurizer::Text(_) => Err(ModelError::MissingFeature(ARTIFACT_FEATURE.into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_response_has_zero_length() {
        let f = Featurizer::default();
        let v = f.featurize("what is rust", "").unwrap();
        assert_eq!(v.get("length"), Some(0.0));
        assert_eq!(v.get("overlap"), Some(0.0));
    }

    #[test]
    fn prefix_indicator_fires() {
        let f = Featurizer::default();
        let v = f
            .featurize("q", "Sure, here is the response: forty two")
            .unwrap();
        assert_eq!(v.get("artifact:prefix:Sure, here is the response: "), Some(1.0));
        assert_eq!(v.get("artifact:wrap:**|**"), Some(0.0));
    }

    #[test]
    fn markup_only_moves_its_indicator() {
        let f = Featurizer::default();
        let plain = f.featurize("w1 w2 tell", "w1 f3 w2").unwrap();
        let dressed = f
            .featurize("w1 w2 tell", "**Sure, here is the response: w1 f3 w2** \u{1f60a}")
            .unwrap();
        for name in ["length", "overlap", "shared_bow:0", "shared_bow:5"] {
            assert_eq!(plain.get(name), dressed.get(name), "{name}");
        }
        assert_eq!(dressed.get("artifact:wrap:**|**"), Some(0.0));
        assert_eq!(dressed.get("artifact:suffix: \u{1f60a}"), Some(1.0));
    }

    #[test]
    fn featurize_is_deterministic() {
        let f = Featurizer::default();
        let a = f.featurize("alpha beta gamma", "beta gamma delta").unwrap();
        let b = f.featurize("alpha beta gamma", "beta gamma delta").unwrap();
        assert_eq!(a, b);
        assert!((a.get("overlap").unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn text_pair_features_are_odd() {
        let f = Featurizer::default();
        let p1 = f.point("a b c", "a b z").unwrap();
        let p2 = f.point("a b c", "**c**").unwrap();
        let fwd = f.pair_from_points(&p1, &p2);
        let rev = f.pair_from_points(&p2, &p1);
        for (x, y) in fwd.iter().zip(&rev) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn synthetic_features() {
        let f = Featurizer::synthetic();
        let x = format_vector(&[1.0, 0.0]);
        let p = f.point(&x, &format_vector(&[0.5, 1.5])).unwrap();
        assert_eq!(p, vec![0.5, 1.0]);
        let q = f.point(&x, &format_vector(&[-0.5, 0.5])).unwrap();
        let pair = f.pair_from_points(&p, &q);
        assert!((pair[0] - 1f64.tanh()).abs() < 1e-15);
        assert_eq!(pair[1], 1.0 - 0.0);
        assert!(f.point(&x, "1 2 3").is_err());
        assert!(f.point("a b", "1 2").is_err());
    }

    #[test]
    fn vector_text_round_trips() {
        let v = vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0];
        assert_eq!(parse_vector(&format_vector(&v)).unwrap(), v);
    }

    #[test]
    fn non_finite_rejected() {
        let schema = Arc::new(FeatureSchema::new(vec!["a".into()]));
        assert!(FeatureVector::new(vec![f64::NAN], schema.clone()).is_err());
        assert!(FeatureVector::new(vec![1.0, 2.0], schema).is_err());
    }
}
