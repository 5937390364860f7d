//! Policies induced by a reward model: best-of-N selection, best-worst pair
//! construction, toy DPO over finite response lists, and artifact-rate curves.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::injector::{detect, ArtifactSpec};
use crate::rewardnet::{PreferenceScorer, ScoreError, TrainConfig};
use crate::util::{binomial_half_width, rng_from, sigmoid, stable_hash_str, unit_from_hash};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_RATES: [f64; 4] = [0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("candidate set needs at least 2 responses, got {0}")]
    TooFewCandidates(usize),
    #[error("candidate {0} is empty")]
    EmptyCandidate(usize),
    #[error("scorer failed: {0}")]
    Score(#[from] ScoreError),
    #[error("all candidates received the same score")]
    Degenerate,
    #[error("invalid pair: {0}")]
    InvalidPair(String),
    #[error("no preference pairs")]
    NoPairs,
    #[error("non-finite DPO loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid setting: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub prompt: String,
    pub candidates: Vec<String>,
}

impl CandidateSet {
    pub fn new(prompt: impl Into<String>, candidates: Vec<String>) -> Result<Self, PolicyError> {
        if candidates.len() < 2 {
            return Err(PolicyError::TooFewCandidates(candidates.len()));
        }
        if let Some(i) = candidates.iter().position(|c| c.is_empty()) {
            return Err(PolicyError::EmptyCandidate(i));
        }
        Ok(CandidateSet {
            prompt: prompt.into(),
            candidates,
        })
    }

    /// The first `n` candidates.
    pub fn truncated(&self, n: usize) -> Result<Self, PolicyError> {
        Self::new(self.prompt.clone(), self.candidates[..n.min(self.candidates.len())].to_vec())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BonRule {
    /// Argmax of total win probability over all pairs.
    #[default]
    TotalWin,
    /// Single-elimination bracket in index order; odd entrants get a bye.
    Bracket,
}

/// Total win probability of each candidate over all `C(N, 2)` comparisons.
pub fn win_scores<S: PreferenceScorer + ?Sized>(scorer: &S, set: &CandidateSet) -> Result<Vec<f64>, PolicyError> {
    if set.candidates.len() < 2 {
        return Err(PolicyError::TooFewCandidates(set.candidates.len()));
    }
    let m = scorer.preference_matrix(&set.prompt, &set.candidates)?;
    Ok(m.iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p).sum())
        .collect())
}

/// First index of the maximum; the lowest index wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn argmin(xs: &[f64]) -> usize {
    let mut worst = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x < xs[worst] {
            worst = i;
        }
    }
    worst
}

pub fn bon_select<S: PreferenceScorer + ?Sized>(scorer: &S, set: &CandidateSet) -> Result<usize, PolicyError> {
    bon_select_with(scorer, set, BonRule::TotalWin)
}

pub fn bon_select_with<S: PreferenceScorer + ?Sized>(
    scorer: &S,
    set: &CandidateSet,
    rule: BonRule,
) -> Result<usize, PolicyError> {
    match rule {
        BonRule::TotalWin => Ok(argmax(&win_scores(scorer, set)?)),
        BonRule::Bracket => {
            if set.candidates.len() < 2 {
                return Err(PolicyError::TooFewCandidates(set.candidates.len()));
            }
            let mut alive: Vec<usize> = (0..set.candidates.len()).collect();
            while alive.len() > 1 {
                let mut next = Vec::with_capacity(alive.len().div_ceil(2));
                for pair in alive.chunks(2) {
                    match *pair {
                        [a, b] => {
                            let p = scorer.preference(&set.prompt, &set.candidates[a], &set.candidates[b])?;
                            next.push(if p >= 0.5 { a } else { b });
                        }
                        [a] => next.push(a),
                        _ => unreachable!(),
                    }
                }
                alive = next;
            }
            Ok(alive[0])
        }
    }
}

/// `(argmax, argmin)` of total win probability.
pub fn best_worst_pair<S: PreferenceScorer + ?Sized>(
    scorer: &S,
    set: &CandidateSet,
) -> Result<(usize, usize), PolicyError> {
    let scores = win_scores(scorer, set)?;
    if scores.iter().all(|s| *s == scores[0]) {
        return Err(PolicyError::Degenerate);
    }
    Ok((argmax(&scores), argmin(&scores)))
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Categorical policy over each prompt's finite response list, with a
/// reference copy frozen at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    logits: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if let Some(i) = logits.iter().position(|l| l.is_empty()) {
            return Err(PolicyError::Config(format!("prompt {i} has no responses")));
        }
        if logits.iter().flatten().any(|l| !l.is_finite()) {
            return Err(PolicyError::Config("logits must be finite".into()));
        }
        Ok(ToyPolicy {
            reference: logits.clone(),
            logits,
        })
    }

    /// Uniform policy with `sizes[k]` responses for prompt `k`.
    pub fn uniform(sizes: &[usize]) -> Result<Self, PolicyError> {
        Self::new(sizes.iter().map(|&n| vec![0.0; n]).collect())
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn reference(&self) -> &[Vec<f64>] {
        &self.reference
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        log_softmax(&self.logits[prompt]).into_iter().map(f64::exp).collect()
    }

    /// Copy of the policy with new logits and the same reference.
    pub fn with_logits(&self, logits: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        let shape_ok = logits.len() == self.logits.len()
            && logits.iter().zip(&self.logits).all(|(a, b)| a.len() == b.len());
        if !shape_ok {
            return Err(PolicyError::Config("logit shape differs from the reference".into()));
        }
        Ok(ToyPolicy {
            logits,
            reference: self.reference.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
}

fn check_pair(policy: &ToyPolicy, pair: &DpoPair) -> Result<(), PolicyError> {
    let Some(l) = policy.logits.get(pair.prompt) else {
        return Err(PolicyError::InvalidPair(format!("prompt {} out of range", pair.prompt)));
    };
    if pair.chosen >= l.len() || pair.rejected >= l.len() || pair.chosen == pair.rejected {
        return Err(PolicyError::InvalidPair(format!(
            "indices ({}, {}) invalid for prompt {} with {} responses",
            pair.chosen,
            pair.rejected,
            pair.prompt,
            l.len()
        )));
    }
    Ok(())
}

/// The DPO margin `h = beta * (log-ratio of chosen - log-ratio of rejected)`.
fn dpo_margin(policy: &ToyPolicy, pair: &DpoPair, beta: f64) -> f64 {
    let lp = log_softmax(&policy.logits[pair.prompt]);
    let lr = log_softmax(&policy.reference[pair.prompt]);
    beta * ((lp[pair.chosen] - lr[pair.chosen]) - (lp[pair.rejected] - lr[pair.rejected]))
}

/// `-ln sigmoid(h)` without overflow.
fn neg_log_sigmoid(h: f64) -> f64 {
    (-h).max(0.0) + (-h.abs()).exp().ln_1p()
}

pub fn dpo_loss(policy: &ToyPolicy, pair: &DpoPair, beta: f64) -> Result<f64, PolicyError> {
    check_pair(policy, pair)?;
    Ok(neg_log_sigmoid(dpo_margin(policy, pair, beta)))
}

/// Mean DPO loss plus `l2 / 2 * |theta - theta_ref|^2`.
pub fn dpo_objective(policy: &ToyPolicy, pairs: &[DpoPair], beta: f64, l2: f64) -> Result<f64, PolicyError> {
    if pairs.is_empty() {
        return Err(PolicyError::NoPairs);
    }
    let mut total = 0.0;
    for p in pairs {
        total += dpo_loss(policy, p, beta)?;
    }
    let drift: f64 = policy
        .logits
        .iter()
        .flatten()
        .zip(policy.reference.iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / pairs.len() as f64 + 0.5 * l2 * drift)
}

/// Gradient of [`dpo_objective`] with respect to the logits. The softmax
/// normalizers cancel in the margin, so only the chosen and rejected
/// logits of each pair receive gradient from the loss.
pub fn dpo_grad(policy: &ToyPolicy, pairs: &[DpoPair], beta: f64, l2: f64) -> Result<Vec<Vec<f64>>, PolicyError> {
    if pairs.is_empty() {
        return Err(PolicyError::NoPairs);
    }
    let mut g: Vec<Vec<f64>> = policy
        .logits
        .iter()
        .zip(&policy.reference)
        .map(|(l, r)| l.iter().zip(r).map(|(a, b)| l2 * (a - b)).collect())
        .collect();
    let w = 1.0 / pairs.len() as f64;
    for p in pairs {
        check_pair(policy, p)?;
        let h = dpo_margin(policy, p, beta);
        let d = -sigmoid(-h) * beta * w;
        g[p.prompt][p.chosen] += d;
        g[p.prompt][p.rejected] -= d;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    /// Full objective after each epoch; the first entry is the initial value.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Seed-deterministic minibatch gradient descent on [`dpo_objective`].
/// The reference logits are never modified.
pub fn dpo_train(
    policy: &ToyPolicy,
    pairs: &[DpoPair],
    config: &TrainConfig,
    beta: f64,
) -> Result<(ToyPolicy, DpoReport), PolicyError> {
    config.validate().map_err(|e| PolicyError::Config(e.to_string()))?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(PolicyError::Config(format!("beta must be nonnegative, got {beta}")));
    }
    if pairs.is_empty() {
        return Err(PolicyError::NoPairs);
    }
    for p in pairs {
        check_pair(policy, p)?;
    }
    let mut pol = policy.clone();
    let mut trace = vec![dpo_objective(&pol, pairs, beta, config.l2)?];
    let mut rng = rng_from(config.seed, &["dpo"]);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DpoPair> = chunk.iter().map(|&i| pairs[i]).collect();
            let g = dpo_grad(&pol, &batch, beta, config.l2)?;
            for (l, gl) in pol.logits.iter_mut().zip(&g) {
                for (v, d) in l.iter_mut().zip(gl) {
                    *v -= config.learning_rate * d;
                }
            }
            step += 1;
        }
        let obj = dpo_objective(&pol, pairs, beta, config.l2)?;
        if !obj.is_finite() || pol.logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteLoss { step });
        }
        trace.push(obj);
    }
    Ok((
        pol,
        DpoReport {
            loss_trace: trace,
            steps: step,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub rate: f64,
    /// Fraction of best-of-N winners carrying the artifact.
    pub proportion: f64,
    pub count: usize,
    /// 95% normal-approximation half-width of `proportion`.
    pub half_width: f64,
}

/// Per-candidate injection coin. It does not depend on the rate, so the
/// injected sets are nested across the rate grid.
fn curve_coin(seed: u64, spec: &ArtifactSpec, set: usize, cand: usize) -> f64 {
    unit_from_hash(stable_hash_str(
        seed,
        &["curve", &spec.label(), &set.to_string(), &cand.to_string()],
    ))
}

/// Best-of-`n` artifact selection rate for each injection rate.
pub fn artifact_rate_curve<S: PreferenceScorer + ?Sized>(
    scorer: &S,
    sets: &[CandidateSet],
    spec: &ArtifactSpec,
    rates: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<CurveRow>, PolicyError> {
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(PolicyError::Config(format!("rate {r} outside [0, 1)")));
    }
    if n < 2 {
        return Err(PolicyError::TooFewCandidates(n));
    }
    if let Some(s) = sets.iter().find(|s| s.candidates.len() < n) {
        return Err(PolicyError::Config(format!(
            "N = {n} exceeds a candidate set of size {}",
            s.candidates.len()
        )));
    }
    rates
        .iter()
        .map(|&rate| {
            let hits: Vec<bool> = sets
                .par_iter()
                .enumerate()
                .map(|(k, set)| {
                    let injected: Vec<String> = set.candidates[..n]
                        .iter()
                        .enumerate()
                        .map(|(j, c)| {
                            if curve_coin(seed, spec, k, j) < rate {
                                spec.apply(c)
                            } else {
                                c.clone()
                            }
                        })
                        .collect();
                    let s = CandidateSet::new(set.prompt.clone(), injected)?;
                    let w = bon_select(scorer, &s)?;
                    Ok(detect(&s.candidates[w], spec))
                })
                .collect::<Result<_, PolicyError>>()?;
            let count = hits.len();
            let proportion = if count == 0 {
                0.0
            } else {
                hits.iter().filter(|h| **h).count() as f64 / count as f64
            };
            Ok(CurveRow {
                rate,
                proportion,
                count,
                half_width: binomial_half_width(proportion, count),
            })
        })
        .collect()
}
