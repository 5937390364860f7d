//! Linear Bradley-Terry and pairwise-ranking reward models trained with
//! soft-label cross-entropy.
//!
//! A Bradley-Terry model scores `r(x, y) = theta . phi(x, y)` and predicts
//! `sigmoid(r(x, y1) - r(x, y2))`. A pairwise ranker computes a directional
//! score `q(x, y1, y2) = sigmoid(theta . psi(x, y1, y2))` and reports the
//! symmetrized `(q(x, y1, y2) + 1 - q(x, y2, y1)) / 2`, so both kinds
//! satisfy `p(x, y1, y2) + p(x, y2, y1) = 1` exactly.

pub mod features;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmenter::CandidateTriplet;
use crate::util::{centered_prob, dot, rng_from, sigmoid, sigmoid_prime};

pub use features::{FeatureSchema, FeatureVector, Featurizer, SyntheticFeaturizer, TextFeaturizer};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-12;

pub const CHECKPOINT_FORMAT: &str = "rrm-reward-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("operation requires a {expected:?} model, got {got:?}")]
    KindMismatch { expected: ModelKind, got: ModelKind },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("feature {0:?} is not finite")]
    NonFiniteFeature(String),
    #[error("schema has no {0:?} feature")]
    MissingFeature(String),
    #[error("cannot decode input: {0}")]
    Encoding(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Error returned by a [`PreferenceScorer`].
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct ScoreError(pub String);

impl ScoreError {
    pub fn new(msg: impl Into<String>) -> Self {
        ScoreError(msg.into())
    }
}

impl From<ModelError> for ScoreError {
    fn from(e: ModelError) -> Self {
        ScoreError(e.to_string())
    }
}

/// Anything that estimates `P(a > b | prompt)`. Shared read-only across threads.
pub trait PreferenceScorer: Sync {
    fn preference(&self, prompt: &str, a: &str, b: &str) -> Result<f64, ScoreError>;

    /// Full matrix `m[i][j] = P(candidates[i] > candidates[j])`; diagonal is 0.5.
    fn preference_matrix(&self, prompt: &str, candidates: &[String]) -> Result<Vec<Vec<f64>>, ScoreError> {
        let n = candidates.len();
        let mut m = vec![vec![0.5; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let p = self.preference(prompt, &candidates[i], &candidates[j])?;
                m[i][j] = p;
                m[j][i] = 1.0 - p;
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BradleyTerry,
    PairwiseRanker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            l2: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!(
                "learning_rate {} must be a nonnegative number",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(ModelError::Config(format!("l2 {} must be nonnegative", self.l2)));
        }
        Ok(())
    }
}

/// Directional features of one comparison in both orders.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub fwd: Vec<f64>,
    pub rev: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub kind: ModelKind,
    pub featurizer: Featurizer,
    pub params: Vec<f64>,
}

impl RewardModel {
    /// Zero-initialized model.
    pub fn new(kind: ModelKind, featurizer: Featurizer) -> Self {
        let dim = match kind {
            ModelKind::BradleyTerry => featurizer.point_schema().len(),
            ModelKind::PairwiseRanker => featurizer.pair_schema().len(),
        };
        RewardModel {
            kind,
            featurizer,
            params: vec![0.0; dim],
        }
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self, ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::Dimension {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(self)
    }

    pub fn schema(&self) -> FeatureSchema {
        match self.kind {
            ModelKind::BradleyTerry => self.featurizer.point_schema(),
            ModelKind::PairwiseRanker => self.featurizer.pair_schema(),
        }
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.schema().index_of(name).map(|i| self.params[i])
    }

    fn require(&self, kind: ModelKind) -> Result<(), ModelError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ModelError::KindMismatch {
                expected: kind,
                got: self.kind,
            })
        }
    }

    /// Pointwise reward `r(x, y)`.
    pub fn reward(&self, prompt: &str, response: &str) -> Result<f64, ModelError> {
        self.require(ModelKind::BradleyTerry)?;
        Ok(dot(&self.params, &self.featurizer.point(prompt, response)?))
    }

    pub fn prepare(&self, prompt: &str, a: &str, b: &str) -> Result<PreparedPair, ModelError> {
        let pa = self.featurizer.point(prompt, a)?;
        let pb = self.featurizer.point(prompt, b)?;
        Ok(self.prepare_points(&pa, &pb))
    }

    /// Directional features from precomputed pointwise vectors.
    pub fn prepare_points(&self, pa: &[f64], pb: &[f64]) -> PreparedPair {
        match self.kind {
            ModelKind::BradleyTerry => {
                let fwd: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x - y).collect();
                let rev = fwd.iter().map(|v| -v).collect();
                PreparedPair { fwd, rev }
            }
            ModelKind::PairwiseRanker => PreparedPair {
                fwd: self.featurizer.pair_from_points(pa, pb),
                rev: self.featurizer.pair_from_points(pb, pa),
            },
        }
    }

    /// Preference probability from prepared features.
    pub fn prob_prepared(&self, fwd: &[f64], rev: &[f64]) -> f64 {
        match self.kind {
            ModelKind::BradleyTerry => sigmoid(dot(&self.params, fwd)),
            ModelKind::PairwiseRanker => {
                let qf = sigmoid(dot(&self.params, fwd));
                let qr = sigmoid(dot(&self.params, rev));
                symmetrize_offset(qf, qr)
            }
        }
    }

    /// `sigmoid(r(x, y1) - r(x, y2))`.
    pub fn bt_prob(&self, prompt: &str, y1: &str, y2: &str) -> Result<f64, ModelError> {
        self.require(ModelKind::BradleyTerry)?;
        let p = self.prepare(prompt, y1, y2)?;
        Ok(self.prob_prepared(&p.fwd, &p.rev))
    }

    /// Raw directional score `q(x, y1, y2)` of a pairwise ranker.
    pub fn directional_score(&self, prompt: &str, y1: &str, y2: &str) -> Result<f64, ModelError> {
        self.require(ModelKind::PairwiseRanker)?;
        let p = self.prepare(prompt, y1, y2)?;
        Ok(sigmoid(dot(&self.params, &p.fwd)))
    }

    /// Symmetrized pairwise ranker probability.
    pub fn pairwise_prob(&self, prompt: &str, y1: &str, y2: &str) -> Result<f64, ModelError> {
        self.require(ModelKind::PairwiseRanker)?;
        let p = self.prepare(prompt, y1, y2)?;
        Ok(self.prob_prepared(&p.fwd, &p.rev))
    }

    /// Dispatch on kind.
    pub fn prob(&self, prompt: &str, y1: &str, y2: &str) -> Result<f64, ModelError> {
        let p = self.prepare(prompt, y1, y2)?;
        Ok(self.prob_prepared(&p.fwd, &p.rev))
    }

    pub fn save(&self, path: impl AsRef<Path>, config: Option<&TrainConfig>) -> Result<(), ModelError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            schema: self.schema().names,
            featurizer: self.featurizer.clone(),
            params: self.params.clone(),
            train_config: config.cloned(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &ck).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<TrainConfig>), ModelError> {
        let r = BufReader::new(File::open(path)?);
        let ck: Checkpoint =
            serde_json::from_reader(r).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unexpected format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let model = RewardModel::new(ck.kind, ck.featurizer);
        if model.schema().names != ck.schema {
            return Err(ModelError::Checkpoint("schema does not match featurizer".into()));
        }
        let model = model.with_params(ck.params)?;
        Ok((model, ck.train_config))
    }
}

/// `(qf + 1 - qr) / 2`, evaluated so that swapping `qf` and `qr` yields the
/// exact complement.
pub fn symmetrize_offset(qf: f64, qr: f64) -> f64 {
    centered_prob((qf - qr) / 2.0)
}

impl PreferenceScorer for RewardModel {
    fn preference(&self, prompt: &str, a: &str, b: &str) -> Result<f64, ScoreError> {
        Ok(self.prob(prompt, a, b)?)
    }

    fn preference_matrix(&self, prompt: &str, candidates: &[String]) -> Result<Vec<Vec<f64>>, ScoreError> {
        let points: Vec<Vec<f64>> = candidates
            .iter()
            .map(|c| self.featurizer.point(prompt, c))
            .collect::<Result<_, _>>()?;
        let n = candidates.len();
        let mut m = vec![vec![0.5; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let p = self.prepare_points(&points[i], &points[j]);
                let v = self.prob_prepared(&p.fwd, &p.rev);
                m[i][j] = v;
                m[j][i] = 1.0 - v;
            }
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    kind: ModelKind,
    schema: Vec<String>,
    featurizer: Featurizer,
    params: Vec<f64>,
    train_config: Option<TrainConfig>,
}

/// Featurized comparisons stored as flat row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub dim: usize,
    pub fwd: Vec<f64>,
    pub rev: Vec<f64>,
    pub targets: Vec<f64>,
}

impl PreparedData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[f64], &[f64], f64) {
        let s = i * self.dim;
        (&self.fwd[s..s + self.dim], &self.rev[s..s + self.dim], self.targets[i])
    }

    pub fn from_candidates(model: &RewardModel, data: &[CandidateTriplet]) -> Result<Self, ModelError> {
        let rows: Vec<PreparedPair> = data
            .par_iter()
            .map(|c| model.prepare(&c.prompt, &c.response_a, &c.response_b))
            .collect::<Result<_, _>>()?;
        let targets = data.iter().map(|c| c.label.value()).collect();
        Ok(Self::from_rows(model.params.len(), rows, targets))
    }

    pub fn from_rows(dim: usize, rows: Vec<PreparedPair>, targets: Vec<f64>) -> Self {
        let mut fwd = Vec::with_capacity(rows.len() * dim);
        let mut rev = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            debug_assert_eq!(r.fwd.len(), dim);
            fwd.extend(r.fwd);
            rev.extend(r.rev);
        }
        PreparedData { dim, fwd, rev, targets }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = PreparedData {
            dim: self.dim,
            fwd: Vec::with_capacity(idx.len() * self.dim),
            rev: Vec::with_capacity(idx.len() * self.dim),
            targets: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            let (f, r, t) = self.row(i);
            out.fwd.extend_from_slice(f);
            out.rev.extend_from_slice(r);
            out.targets.push(t);
        }
        out
    }
}

/// Soft-label cross-entropy of one example; `p` is clamped into `[eps, 1 - eps]`.
pub fn cross_entropy(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Loss of one row and accumulation of its gradient (scaled by `weight`) into `grad`.
fn row_loss_grad(
    model: &RewardModel,
    fwd: &[f64],
    rev: &[f64],
    target: f64,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let (p, loss);
    match model.kind {
        ModelKind::BradleyTerry => {
            let z = dot(&model.params, fwd);
            p = sigmoid(z);
            loss = cross_entropy(p, target);
            if let Some(g) = grad {
                if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                    let c = weight * (p - target);
                    for (gi, fi) in g.iter_mut().zip(fwd) {
                        *gi += c * fi;
                    }
                }
            }
        }
        ModelKind::PairwiseRanker => {
            let zf = dot(&model.params, fwd);
            let zr = dot(&model.params, rev);
            p = symmetrize_offset(sigmoid(zf), sigmoid(zr));
            loss = cross_entropy(p, target);
            if let Some(g) = grad {
                if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                    let dl_dp = (p - target) / (p * (1.0 - p));
                    let cf = weight * dl_dp * sigmoid_prime(zf) / 2.0;
                    let cr = weight * dl_dp * sigmoid_prime(zr) / 2.0;
                    for ((gi, fi), ri) in g.iter_mut().zip(fwd).zip(rev) {
                        *gi += cf * fi - cr * ri;
                    }
                }
            }
        }
    }
    loss
}

pub fn loss_prepared(model: &RewardModel, data: &PreparedData) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let total: f64 = (0..data.len())
        .map(|i| {
            let (f, r, t) = data.row(i);
            row_loss_grad(model, f, r, t, 0.0, None)
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Gradient of the mean loss plus `l2 * params`.
pub fn grad_prepared(model: &RewardModel, data: &PreparedData, l2: f64) -> Result<Vec<f64>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let w = 1.0 / data.len() as f64;
    let mut g = vec![0.0; model.params.len()];
    for i in 0..data.len() {
        let (f, r, t) = data.row(i);
        row_loss_grad(model, f, r, t, w, Some(&mut g));
    }
    for (gi, pi) in g.iter_mut().zip(&model.params) {
        *gi += l2 * pi;
    }
    Ok(g)
}

/// Mean soft-label cross-entropy over `batch` (no regularization term).
pub fn loss(model: &RewardModel, batch: &[CandidateTriplet]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    loss_prepared(model, &PreparedData::from_candidates(model, batch)?)
}

/// Analytic gradient of [`loss`] plus the `l2 * params` term.
pub fn grad(model: &RewardModel, batch: &[CandidateTriplet], l2: f64) -> Result<Vec<f64>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    grad_prepared(model, &PreparedData::from_candidates(model, batch)?, l2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss over each epoch.
    pub epoch_losses: Vec<f64>,
    /// Full-data loss before the first step and after the last.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Seed-deterministic minibatch gradient descent.
pub fn train_prepared(
    model: &RewardModel,
    data: &PreparedData,
    config: &TrainConfig,
) -> Result<(RewardModel, TrainReport), ModelError> {
    config.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut m = model.clone();
    let initial_loss = loss_prepared(&m, data)?;
    let mut rng = rng_from(config.seed, &["train-rm"]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; m.params.len()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (f, r, t) = data.row(i);
                batch_loss += row_loss_grad(&m, f, r, t, w, Some(&mut grad));
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            epoch_total += batch_loss;
            for (p, g) in m.params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * (g + config.l2 * *p);
            }
            step += 1;
        }
        epoch_losses.push(epoch_total / data.len() as f64);
    }
    let final_loss = loss_prepared(&m, data)?;
    if !final_loss.is_finite() {
        return Err(ModelError::NonFiniteLoss { step });
    }
    Ok((
        m,
        TrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
            steps: step,
        },
    ))
}

pub fn train(
    model: &RewardModel,
    dataset: &[CandidateTriplet],
    config: &TrainConfig,
) -> Result<(RewardModel, TrainReport), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let data = PreparedData::from_candidates(model, dataset)?;
    train_prepared(model, &data, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Accuracy on decisive labels; `None` without decisive examples.
    pub accuracy: Option<f64>,
    pub decisive: usize,
    /// Mean `|p_hat - 0.5|` over tie labels; `None` without ties.
    pub tie_gap: Option<f64>,
    pub ties: usize,
    pub mean_loss: f64,
}

pub fn evaluate_prepared(model: &RewardModel, data: &PreparedData) -> Result<EvalMetrics, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut correct = 0usize;
    let mut decisive = 0usize;
    let mut gap = 0.0;
    let mut ties = 0usize;
    let mut total_loss = 0.0;
    for i in 0..data.len() {
        let (f, r, t) = data.row(i);
        let p = model.prob_prepared(f, r);
        total_loss += cross_entropy(p, t);
        if t == 0.5 {
            ties += 1;
            gap += (p - t).abs();
        } else {
            decisive += 1;
            if (p > 0.5) == (t == 1.0) {
                correct += 1;
            }
        }
    }
    Ok(EvalMetrics {
        accuracy: (decisive > 0).then(|| correct as f64 / decisive as f64),
        decisive,
        tie_gap: (ties > 0).then(|| gap / ties as f64),
        ties,
        mean_loss: total_loss / data.len() as f64,
    })
}

pub fn evaluate(model: &RewardModel, dataset: &[CandidateTriplet]) -> Result<EvalMetrics, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    evaluate_prepared(model, &PreparedData::from_candidates(model, dataset)?)
}
