//! Synthetic causal laboratory.
//!
//! Instances follow the DAG `X -> S <- (Y1, Y2)`, `(Y1, Y2) -> A`,
//! `(S, A) -> C` with
//!
//! * `s = tanh(<x, y1> - <x, y2>) + N(0, sigma_s)`
//! * `a = mean(y1) - mean(y2) + N(0, sigma_a)`, or `a = beta_as * s + alpha_a`
//!   under perfect correlation
//! * `c ~ Bernoulli(sigmoid(beta_s * s + beta_a * a + alpha))`
//!
//! Prompts are `x ~ N(0, prompt_scale^2 / dim)` per coordinate and responses
//! `y = relevance * x + N(0, response_noise^2)`.

pub mod text;

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmenter::PrefLabel;
use crate::corpus::PreferenceExample;
use crate::rewardnet::features::{format_vector, ARTIFACT_FEATURE};
use crate::rewardnet::{ModelError, RewardModel};
use crate::util::{dot, mean, pearson, rng_from, sigmoid};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid causal config: {0}")]
    Config(String),
    #[error("coupling mismatch: {0:?} vs {1:?}")]
    CouplingMismatch(Coupling, Coupling),
    #[error("reparametrization needs perfectly correlated coupling")]
    NotPerfectlyCorrelated,
    #[error("predictions, artifact values and strata differ in length ({0}, {1}, {2})")]
    Length(usize, usize, usize),
    #[error("need at least 2 strata, got {0}")]
    TooFewStrata(usize),
    #[error("strata with fewer than 2 distinct artifact values: {0:?}")]
    DegenerateStrata(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Coupling {
    Independent,
    PerfectCorr { beta_as: f64, alpha_a: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalConfig {
    pub beta_s: f64,
    pub beta_a: f64,
    pub alpha: f64,
    pub sigma_s: f64,
    pub sigma_a: f64,
    pub coupling: Coupling,
    pub n: usize,
    pub seed: u64,
    pub dim: usize,
    pub prompt_scale: f64,
    pub relevance: f64,
    pub response_noise: f64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            beta_s: 1.0,
            beta_a: 1.0,
            alpha: 0.0,
            sigma_s: 0.0,
            sigma_a: 0.0,
            coupling: Coupling::Independent,
            n: 1000,
            seed: 0,
            dim: 4,
            prompt_scale: 1.0,
            relevance: 1.0,
            response_noise: 0.5,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let reals = [
            ("beta_s", self.beta_s),
            ("beta_a", self.beta_a),
            ("alpha", self.alpha),
            ("sigma_s", self.sigma_s),
            ("sigma_a", self.sigma_a),
            ("prompt_scale", self.prompt_scale),
            ("relevance", self.relevance),
            ("response_noise", self.response_noise),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !v.is_finite()) {
            return Err(SynthError::Config(format!("{name} must be finite")));
        }
        for (name, v) in [
            ("sigma_s", self.sigma_s),
            ("sigma_a", self.sigma_a),
            ("prompt_scale", self.prompt_scale),
            ("response_noise", self.response_noise),
        ] {
            if v < 0.0 {
                return Err(SynthError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.dim == 0 {
            return Err(SynthError::Config("dim must be positive".into()));
        }
        if let Coupling::PerfectCorr { beta_as, alpha_a } = self.coupling {
            if !(beta_as > 0.0 && beta_as.is_finite()) || !alpha_a.is_finite() {
                return Err(SynthError::Config(format!(
                    "perfect correlation needs finite beta_as > 0 (got {beta_as}) and finite alpha_a"
                )));
            }
        }
        Ok(())
    }

    /// `P(C = 1 | s, a)`.
    pub fn probability(&self, s: f64, a: f64) -> f64 {
        sigmoid(self.beta_s * s + self.beta_a * a + self.alpha)
    }
}

/// Contextual signal before noise.
pub fn s_fn(x: &[f64], y1: &[f64], y2: &[f64]) -> f64 {
    (dot(x, y1) - dot(x, y2)).tanh()
}

/// Artifact signal before noise; independent of the prompt.
pub fn a_fn(y1: &[f64], y2: &[f64]) -> f64 {
    mean(y1) - mean(y2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub x: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub s: f64,
    pub a: f64,
    pub c: PrefLabel,
}

impl SyntheticInstance {
    /// Preference record with vector-encoded texts; the preferred response is chosen.
    pub fn to_example(&self, id: impl Into<String>) -> PreferenceExample {
        let (w, l) = if self.c.value() == 1.0 {
            (&self.y1, &self.y2)
        } else {
            (&self.y2, &self.y1)
        };
        PreferenceExample::new(id, format_vector(&self.x), format_vector(w), format_vector(l))
    }
}

pub fn instance_id(i: usize) -> String {
    format!("syn-{i}")
}

struct Sampler {
    rng: ChaCha8Rng,
    dim: usize,
    prompt_sd: f64,
    relevance: f64,
    noise: f64,
}

impl Sampler {
    fn new(config: &CausalConfig, stream: &str) -> Self {
        Sampler {
            rng: rng_from(config.seed, &["synthlab", stream]),
            dim: config.dim,
            prompt_sd: config.prompt_scale / (config.dim as f64).sqrt(),
            relevance: config.relevance,
            noise: config.response_noise,
        }
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn prompt(&mut self) -> Vec<f64> {
        (0..self.dim).map(|_| self.prompt_sd * self.normal()).collect()
    }

    fn response(&mut self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|xi| self.relevance * xi + self.noise * self.normal())
            .collect()
    }

    fn label(&mut self, config: &CausalConfig, s: f64, a: f64) -> PrefLabel {
        if self.rng.random::<f64>() < config.probability(s, a) {
            PrefLabel::FIRST
        } else {
            PrefLabel::SECOND
        }
    }

    fn latent(&mut self, config: &CausalConfig, s0: f64, a0: f64) -> (f64, f64) {
        let s = s0 + config.sigma_s * self.normal();
        let a = match config.coupling {
            Coupling::Independent => a0 + config.sigma_a * self.normal(),
            Coupling::PerfectCorr { beta_as, alpha_a } => beta_as * s + alpha_a,
        };
        (s, a)
    }
}

/// Draw `config.n` instances. Deterministic in `config`.
pub fn generate(config: &CausalConfig) -> Result<Vec<SyntheticInstance>, SynthError> {
    config.validate()?;
    let mut sm = Sampler::new(config, "generate");
    let mut out = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let x = sm.prompt();
        let y1 = sm.response(&x);
        let y2 = sm.response(&x);
        let (s, a) = sm.latent(config, s_fn(&x, &y1, &y2), a_fn(&y1, &y2));
        let c = sm.label(config, s, a);
        out.push(SyntheticInstance { x, y1, y2, s, a, c });
    }
    Ok(out)
}

/// Held-out probes for conditional-independence checks. Each stratum fixes a
/// response pair taken from two unrelated prompts; within it the prompt is
/// redrawn and the artifact receives independent `N(0, artifact_noise)` noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub strata: Vec<usize>,
    pub instances: Vec<SyntheticInstance>,
}

pub fn generate_probes(
    config: &CausalConfig,
    strata: usize,
    per_stratum: usize,
    artifact_noise: f64,
) -> Result<ProbeSet, SynthError> {
    config.validate()?;
    if !(artifact_noise >= 0.0 && artifact_noise.is_finite()) {
        return Err(SynthError::Config(format!("artifact noise must be nonnegative, got {artifact_noise}")));
    }
    let mut sm = Sampler::new(config, "probes");
    let mut ids = Vec::with_capacity(strata * per_stratum);
    let mut instances = Vec::with_capacity(strata * per_stratum);
    for k in 0..strata {
        let (x1, x2) = (sm.prompt(), sm.prompt());
        let y1 = sm.response(&x1);
        let y2 = sm.response(&x2);
        let a0 = a_fn(&y1, &y2);
        for _ in 0..per_stratum {
            let x = sm.prompt();
            let s = s_fn(&x, &y1, &y2) + config.sigma_s * sm.normal();
            let a = a0 + artifact_noise * sm.normal();
            let c = sm.label(config, s, a);
            ids.push(k);
            instances.push(SyntheticInstance {
                x,
                y1: y1.clone(),
                y2: y2.clone(),
                s,
                a,
                c,
            });
        }
    }
    Ok(ProbeSet { strata: ids, instances })
}

/// The artifact-free parameterization with identical likelihood under
/// `A = beta_as * S + alpha_a`:
/// `beta_s' = beta_s + beta_as * beta_a`, `alpha' = alpha + alpha_a * beta_a`, `beta_a' = 0`.
pub fn reparametrize(h1: &CausalConfig) -> Result<CausalConfig, SynthError> {
    let Coupling::PerfectCorr { beta_as, alpha_a } = h1.coupling else {
        return Err(SynthError::NotPerfectlyCorrelated);
    };
    Ok(CausalConfig {
        beta_s: h1.beta_s + beta_as * h1.beta_a,
        alpha: h1.alpha + alpha_a * h1.beta_a,
        beta_a: 0.0,
        ..h1.clone()
    })
}

/// Max over instances of `|P_h0(c = 1) - P_h1(c = 1)|` on the stored (s, a).
pub fn likelihood_equivalence(
    h0: &CausalConfig,
    h1: &CausalConfig,
    data: &[SyntheticInstance],
) -> Result<f64, SynthError> {
    if h0.coupling != h1.coupling {
        return Err(SynthError::CouplingMismatch(h0.coupling, h1.coupling));
    }
    Ok(data
        .iter()
        .map(|d| (h0.probability(d.s, d.a) - h1.probability(d.s, d.a)).abs())
        .fold(0.0, f64::max))
}

/// Model predictions from the stored latent (s, a) of each instance.
pub fn latent_predictions(model: &RewardModel, data: &[SyntheticInstance]) -> Result<Vec<f64>, ModelError> {
    data.iter()
        .map(|d| {
            let (f, r) = model.featurizer.pair_from_latent(d.s, d.a)?;
            Ok(model.prob_prepared(&f, &r))
        })
        .collect()
}

/// Mean `|p(a + delta) - p(a - delta)|` over probes with everything else held fixed.
pub fn artifact_sensitivity(
    model: &RewardModel,
    probes: &[SyntheticInstance],
    delta: f64,
) -> Result<f64, ModelError> {
    let k = model
        .schema()
        .index_of(ARTIFACT_FEATURE)
        .ok_or_else(|| ModelError::MissingFeature(ARTIFACT_FEATURE.into()))?;
    if probes.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    for d in probes {
        let (f, r) = model.featurizer.pair_from_latent(d.s, d.a)?;
        let shifted = |sign: f64| {
            let (mut f, mut r) = (f.clone(), r.clone());
            f[k] += sign * delta;
            r[k] -= sign * delta;
            model.prob_prepared(&f, &r)
        };
        total += (shifted(1.0) - shifted(-1.0)).abs();
    }
    Ok(total / probes.len() as f64)
}

/// Mean over strata of `|corr(prediction, artifact)|`. A stratum whose
/// predictions are constant contributes 0.
pub fn conditional_independence_stat(
    predictions: &[f64],
    artifact_values: &[f64],
    strata: &[usize],
) -> Result<f64, SynthError> {
    if predictions.len() != artifact_values.len() || predictions.len() != strata.len() {
        return Err(SynthError::Length(predictions.len(), artifact_values.len(), strata.len()));
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&p, &a), &k) in predictions.iter().zip(artifact_values).zip(strata) {
        let g = groups.entry(k).or_default();
        g.0.push(p);
        g.1.push(a);
    }
    if groups.len() < 2 {
        return Err(SynthError::TooFewStrata(groups.len()));
    }
    let degenerate: Vec<usize> = groups
        .iter()
        .filter(|(_, (_, a))| a.iter().all(|v| *v == a[0]))
        .map(|(k, _)| *k)
        .collect();
    if !degenerate.is_empty() {
        return Err(SynthError::DegenerateStrata(degenerate));
    }
    let total: f64 = groups
        .values()
        .map(|(p, a)| pearson(p, a).map_or(0.0, f64::abs))
        .sum();
    Ok(total / groups.len() as f64)
}

#[derive(Serialize)]
struct Latent {
    s: f64,
    a: f64,
    coupling: Coupling,
}

#[derive(Serialize)]
struct SyntheticRecord<'a> {
    id: &'a str,
    context: &'a str,
    response_w: &'a str,
    response_l: &'a str,
    latent: Latent,
}

/// Preference lines with an extra `latent` sub-record `{s, a, coupling}`.
/// Regular loaders ignore it.
pub fn write_synthetic<W: Write>(
    mut w: W,
    data: &[SyntheticInstance],
    coupling: Coupling,
) -> std::io::Result<()> {
    for (i, d) in data.iter().enumerate() {
        let ex = d.to_example(instance_id(i));
        let rec = SyntheticRecord {
            id: &ex.id,
            context: &ex.prompt,
            response_w: &ex.chosen,
            response_l: &ex.rejected,
            latent: Latent { s: d.s, a: d.a, coupling },
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
