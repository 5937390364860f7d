//! Causal data augmentation: contextual labeling rules, the 14 augmented
//! comparisons per triple, the full 45-comparison enumeration, and the
//! difficulty filter.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ExampleTriple, PreferenceExample};
use crate::rewardnet::PreferenceScorer;
use crate::util::{rng_from, stable_hash_str, unit_from_hash};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("degenerate triple: example ids {0:?} are not pairwise distinct")]
    DegenerateTriple([String; 3]),
    #[error("invalid filter setting: {0}")]
    InvalidFilter(String),
    #[error("scorer failed on candidate {id}: {message}")]
    Scorer { id: String, message: String },
    #[error("scorer returned {value} for candidate {id}, outside [0, 1]")]
    ScoreRange { id: String, value: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid preference label {0}; expected 0, 0.5 or 1")]
    Label(f64),
}

/// Probability that the first response wins: 1, 0, or 0.5 for a tie.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PrefLabel(f64);

impl PrefLabel {
    pub const FIRST: PrefLabel = PrefLabel(1.0);
    pub const SECOND: PrefLabel = PrefLabel(0.0);
    pub const TIE: PrefLabel = PrefLabel(0.5);

    pub fn new(p: f64) -> Result<Self, AugmentError> {
        if p == 0.0 || p == 0.5 || p == 1.0 {
            Ok(PrefLabel(p))
        } else {
            Err(AugmentError::Label(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_tie(self) -> bool {
        self.0 == 0.5
    }

    /// Label after swapping the two responses.
    pub fn flipped(self) -> Self {
        PrefLabel(1.0 - self.0)
    }
}

impl TryFrom<f64> for PrefLabel {
    type Error = AugmentError;
    fn try_from(p: f64) -> Result<Self, Self::Error> {
        PrefLabel::new(p)
    }
}

impl From<PrefLabel> for f64 {
    fn from(l: PrefLabel) -> f64 {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    NonContextual,
    Neutral,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Original => "original",
            Provenance::NonContextual => "non_contextual",
            Provenance::Neutral => "neutral",
        })
    }
}

/// Whether a response was the chosen (`W`) or rejected (`L`) side of its example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "w")]
    W,
    #[serde(rename = "l")]
    L,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResponseOrigin {
    pub example_id: String,
    pub role: Role,
}

impl ResponseOrigin {
    pub fn new(example_id: impl Into<String>, role: Role) -> Self {
        ResponseOrigin {
            example_id: example_id.into(),
            role,
        }
    }

    pub fn text<'a>(&self, ex: &'a PreferenceExample) -> &'a str {
        match self.role {
            Role::W => &ex.chosen,
            Role::L => &ex.rejected,
        }
    }
}

/// A (prompt, response_a, response_b) comparison with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTriplet {
    pub id: String,
    pub prompt_id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub a_origin: ResponseOrigin,
    pub b_origin: ResponseOrigin,
    pub label: PrefLabel,
    pub provenance: Provenance,
}

impl CandidateTriplet {
    /// Same comparison with the responses swapped and the label flipped.
    pub fn swapped(&self) -> Self {
        CandidateTriplet {
            id: self.id.clone(),
            prompt_id: self.prompt_id.clone(),
            prompt: self.prompt.clone(),
            response_a: self.response_b.clone(),
            response_b: self.response_a.clone(),
            a_origin: self.b_origin.clone(),
            b_origin: self.a_origin.clone(),
            label: self.label.flipped(),
            provenance: self.provenance,
        }
    }

    pub fn source_ids(&self) -> Vec<&str> {
        let mut ids = vec![
            self.prompt_id.as_str(),
            self.a_origin.example_id.as_str(),
            self.b_origin.example_id.as_str(),
        ];
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Origin of the labeled winner, `None` for ties.
    pub fn winner_origin(&self) -> Option<&ResponseOrigin> {
        if self.label == PrefLabel::FIRST {
            Some(&self.a_origin)
        } else if self.label == PrefLabel::SECOND {
            Some(&self.b_origin)
        } else {
            None
        }
    }

    pub fn is_contextual(&self, origin: &ResponseOrigin) -> bool {
        origin.example_id == self.prompt_id
    }

    /// Order-independent key: (prompt, {origins}, label seen from the smaller origin).
    pub fn unordered_key(&self) -> (String, ResponseOrigin, ResponseOrigin, u8) {
        let a = (&self.a_origin.example_id, self.a_origin.role as u8);
        let b = (&self.b_origin.example_id, self.b_origin.role as u8);
        let c = if a <= b { self.clone() } else { self.swapped() };
        (
            c.prompt_id,
            c.a_origin,
            c.b_origin,
            (c.label.value() * 2.0).round() as u8,
        )
    }
}

/// The three contextual labeling rules. Both responses contextual: the
/// dataset winner wins. Exactly one contextual: it wins. Neither: tie.
/// Identical origins compare as a tie.
pub fn label_triplet(prompt_id: &str, a: &ResponseOrigin, b: &ResponseOrigin) -> PrefLabel {
    let a_ctx = a.example_id == prompt_id;
    let b_ctx = b.example_id == prompt_id;
    match (a_ctx, b_ctx) {
        (true, true) => match (a.role, b.role) {
            (Role::W, Role::L) => PrefLabel::FIRST,
            (Role::L, Role::W) => PrefLabel::SECOND,
            _ => PrefLabel::TIE,
        },
        (true, false) => PrefLabel::FIRST,
        (false, true) => PrefLabel::SECOND,
        (false, false) => PrefLabel::TIE,
    }
}

/// Slot of an example inside a triple: base `i`, peers `sigma1(i)` and `sigma2(i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Base,
    Peer1,
    Peer2,
}

const NON_CONTEXTUAL_ROWS: [((Slot, Role), (Slot, Role)); 8] = [
    ((Slot::Base, Role::W), (Slot::Peer1, Role::W)),
    ((Slot::Base, Role::W), (Slot::Peer2, Role::W)),
    ((Slot::Base, Role::W), (Slot::Peer1, Role::L)),
    ((Slot::Base, Role::W), (Slot::Peer2, Role::L)),
    ((Slot::Base, Role::L), (Slot::Peer1, Role::W)),
    ((Slot::Base, Role::L), (Slot::Peer2, Role::W)),
    ((Slot::Base, Role::L), (Slot::Peer1, Role::L)),
    ((Slot::Base, Role::L), (Slot::Peer2, Role::L)),
];

const NEUTRAL_ROWS: [((Slot, Role), (Slot, Role)); 6] = [
    ((Slot::Peer1, Role::W), (Slot::Peer1, Role::L)),
    ((Slot::Peer2, Role::W), (Slot::Peer2, Role::L)),
    ((Slot::Peer1, Role::W), (Slot::Peer2, Role::W)),
    ((Slot::Peer1, Role::W), (Slot::Peer2, Role::L)),
    ((Slot::Peer2, Role::W), (Slot::Peer1, Role::L)),
    ((Slot::Peer1, Role::L), (Slot::Peer2, Role::L)),
];

fn slot_example(triple: &ExampleTriple, slot: Slot) -> &PreferenceExample {
    match slot {
        Slot::Base => &triple.base,
        Slot::Peer1 => &triple.peer1,
        Slot::Peer2 => &triple.peer2,
    }
}

fn check_triple(triple: &ExampleTriple) -> Result<(), AugmentError> {
    if triple.has_distinct_ids() {
        Ok(())
    } else {
        Err(AugmentError::DegenerateTriple([
            triple.base.id.clone(),
            triple.peer1.id.clone(),
            triple.peer2.id.clone(),
        ]))
    }
}

/// Builds labeled comparisons from examples and triples. Response order is
/// randomized per candidate from `seed` and the candidate id, with the label
/// adjusted to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmenter {
    pub seed: u64,
    pub include_neutrals: bool,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter {
            seed: 0,
            include_neutrals: true,
        }
    }
}

impl Augmenter {
    pub fn new(seed: u64) -> Self {
        Augmenter {
            seed,
            include_neutrals: true,
        }
    }

    fn maybe_flip(&self, c: CandidateTriplet) -> CandidateTriplet {
        let coin = unit_from_hash(stable_hash_str(self.seed, &["order", &c.id]));
        if coin < 0.5 {
            c.swapped()
        } else {
            c
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        &self,
        id: String,
        prompt_ex: &PreferenceExample,
        a_ex: &PreferenceExample,
        a_role: Role,
        b_ex: &PreferenceExample,
        b_role: Role,
        provenance: Provenance,
    ) -> CandidateTriplet {
        let a_origin = ResponseOrigin::new(a_ex.id.clone(), a_role);
        let b_origin = ResponseOrigin::new(b_ex.id.clone(), b_role);
        let label = label_triplet(&prompt_ex.id, &a_origin, &b_origin);
        CandidateTriplet {
            id,
            prompt_id: prompt_ex.id.clone(),
            prompt: prompt_ex.prompt.clone(),
            response_a: a_origin.text(a_ex).to_string(),
            response_b: b_origin.text(b_ex).to_string(),
            a_origin,
            b_origin,
            label,
            provenance,
        }
    }

    /// The original comparison of an example, in randomized order.
    pub fn original(&self, ex: &PreferenceExample) -> CandidateTriplet {
        let c = self.build(
            format!("{}/orig", ex.id),
            ex,
            ex,
            Role::W,
            ex,
            Role::L,
            Provenance::Original,
        );
        self.maybe_flip(c)
    }

    /// The 8 non-contextual and 6 neutral comparisons under the base prompt
    /// (neutrals omitted when `include_neutrals` is false).
    pub fn augment_example(&self, triple: &ExampleTriple) -> Result<Vec<CandidateTriplet>, AugmentError> {
        check_triple(triple)?;
        let base = &triple.base;
        let mut out = Vec::with_capacity(14);
        for (k, ((sa, ra), (sb, rb))) in NON_CONTEXTUAL_ROWS.iter().enumerate() {
            let c = self.build(
                format!("{}/nc{}", base.id, k + 1),
                base,
                slot_example(triple, *sa),
                *ra,
                slot_example(triple, *sb),
                *rb,
                Provenance::NonContextual,
            );
            out.push(self.maybe_flip(c));
        }
        if self.include_neutrals {
            for (k, ((sa, ra), (sb, rb))) in NEUTRAL_ROWS.iter().enumerate() {
                let c = self.build(
                    format!("{}/tie{}", base.id, k + 1),
                    base,
                    slot_example(triple, *sa),
                    *ra,
                    slot_example(triple, *sb),
                    *rb,
                    Provenance::Neutral,
                );
                out.push(self.maybe_flip(c));
            }
        }
        Ok(out)
    }

    /// Every unordered comparison over the triple's 3 prompts and 6 responses
    /// (3 x C(6, 2) = 45), labeled by [`label_triplet`], in canonical order.
    pub fn enumerate_all(&self, triple: &ExampleTriple) -> Result<Vec<CandidateTriplet>, AugmentError> {
        check_triple(triple)?;
        let slots = [Slot::Base, Slot::Peer1, Slot::Peer2];
        let responses: Vec<(Slot, Role)> = slots
            .iter()
            .flat_map(|&s| [(s, Role::W), (s, Role::L)])
            .collect();
        let mut out = Vec::with_capacity(45);
        for &prompt_slot in &slots {
            let prompt_ex = slot_example(triple, prompt_slot);
            for i in 0..responses.len() {
                for j in (i + 1)..responses.len() {
                    let (sa, ra) = responses[i];
                    let (sb, rb) = responses[j];
                    let a_ex = slot_example(triple, sa);
                    let b_ex = slot_example(triple, sb);
                    let provenance = {
                        let a_ctx = a_ex.id == prompt_ex.id;
                        let b_ctx = b_ex.id == prompt_ex.id;
                        match (a_ctx, b_ctx) {
                            (true, true) => Provenance::Original,
                            (false, false) => Provenance::Neutral,
                            _ => Provenance::NonContextual,
                        }
                    };
                    out.push(self.build(
                        format!("{}/all/{}/{}-{}", triple.base.id, prompt_ex.id, i, j),
                        prompt_ex,
                        a_ex,
                        ra,
                        b_ex,
                        rb,
                        provenance,
                    ));
                }
            }
        }
        Ok(out)
    }

    /// Originals followed by augmented candidates for every triple, in input order.
    pub fn augment_all(
        &self,
        triples: &[ExampleTriple],
    ) -> Result<(Vec<CandidateTriplet>, Vec<CandidateTriplet>), AugmentError> {
        let originals = triples.par_iter().map(|t| self.original(&t.base)).collect();
        let augmented: Vec<Vec<CandidateTriplet>> = triples
            .par_iter()
            .map(|t| self.augment_example(t))
            .collect::<Result<_, _>>()?;
        Ok((originals, augmented.into_iter().flatten().collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDirection {
    /// Keep candidates with `|p_hat - p_star| >= threshold`.
    KeepHard,
    /// Keep candidates with `|p_hat - p_star| < threshold`.
    KeepEasy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub threshold: f64,
    pub sample_fraction: f64,
    pub seed: u64,
    pub direction: FilterDirection,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            threshold: 0.2,
            sample_fraction: 0.5,
            seed: 0,
            direction: FilterDirection::KeepHard,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<CandidateTriplet>,
    pub scored: usize,
}

/// Indices of the seed-deterministic scoring subsample, ascending.
pub fn filter_sample(n: usize, sample_fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((n as f64) * sample_fraction).round() as usize;
    let mut rng = rng_from(seed, &["difficulty-filter"]);
    let mut idx = sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Score a `sample_fraction` subsample and keep candidates by their gap
/// `|p_hat - p_star|` against `threshold`; unscored candidates are dropped.
pub fn filter_by_difficulty<S: PreferenceScorer + ?Sized>(
    candidates: &[CandidateTriplet],
    scorer: &S,
    config: &FilterConfig,
) -> Result<FilterOutcome, AugmentError> {
    let t = config.threshold;
    let f = config.sample_fraction;
    if !(t > 0.0 && t.is_finite()) {
        return Err(AugmentError::InvalidFilter(format!("threshold {t} must be positive")));
    }
    if !(f > 0.0 && f <= 1.0) {
        return Err(AugmentError::InvalidFilter(format!(
            "sample_fraction {f} must be in (0, 1]"
        )));
    }
    let picked = filter_sample(candidates.len(), f, config.seed);
    let decisions: Vec<Option<usize>> = picked
        .par_iter()
        .map(|&i| {
            let c = &candidates[i];
            let p = scorer
                .preference(&c.prompt, &c.response_a, &c.response_b)
                .map_err(|e| AugmentError::Scorer {
                    id: c.id.clone(),
                    message: e.to_string(),
                })?;
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::ScoreRange { id: c.id.clone(), value: p });
            }
            let gap = (p - c.label.value()).abs();
            let keep = match config.direction {
                FilterDirection::KeepHard => gap >= t,
                FilterDirection::KeepEasy => gap < t,
            };
            Ok(keep.then_some(i))
        })
        .collect::<Result<_, AugmentError>>()?;
    let kept = decisions
        .into_iter()
        .flatten()
        .map(|i| candidates[i].clone())
        .collect();
    Ok(FilterOutcome {
        kept,
        scored: picked.len(),
    })
}

/// Originals first, then the kept augmented candidates.
pub fn merge(original: Vec<CandidateTriplet>, kept: Vec<CandidateTriplet>) -> Vec<CandidateTriplet> {
    let mut out = original;
    out.extend(kept);
    out
}

/// Seed-deterministic global shuffle applied before training.
pub fn shuffle_for_training(mut data: Vec<CandidateTriplet>, seed: u64) -> Vec<CandidateTriplet> {
    let mut rng = rng_from(seed, &["training-shuffle"]);
    data.shuffle(&mut rng);
    data
}

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    id: String,
    context: String,
    response_w: String,
    response_l: String,
    neutral: bool,
    provenance: Provenance,
    p_first_wins: PrefLabel,
    prompt_id: String,
    origin_a: ResponseOrigin,
    origin_b: ResponseOrigin,
}

/// Write candidates as line-delimited records. `response_w` / `response_l`
/// hold the first and second response; `p_first_wins` carries the label.
pub fn write_candidates<W: Write>(mut w: W, candidates: &[CandidateTriplet]) -> std::io::Result<()> {
    for c in candidates {
        let rec = CandidateRecord {
            id: c.id.clone(),
            context: c.prompt.clone(),
            response_w: c.response_a.clone(),
            response_l: c.response_b.clone(),
            neutral: c.label.is_tie(),
            provenance: c.provenance,
            p_first_wins: c.label,
            prompt_id: c.prompt_id.clone(),
            origin_a: c.a_origin.clone(),
            origin_b: c.b_origin.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_candidates<R: BufRead>(r: R) -> Result<Vec<CandidateTriplet>, AugmentError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| AugmentError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let rec: CandidateRecord = serde_json::from_str(&text).map_err(|e| AugmentError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.neutral != rec.p_first_wins.is_tie() {
            return Err(AugmentError::Parse {
                line: line_no,
                message: "\"neutral\" disagrees with \"p_first_wins\"".into(),
            });
        }
        out.push(CandidateTriplet {
            id: rec.id,
            prompt_id: rec.prompt_id,
            prompt: rec.context,
            response_a: rec.response_w,
            response_b: rec.response_l,
            a_origin: rec.origin_a,
            b_origin: rec.origin_b,
            label: rec.p_first_wins,
            provenance: rec.provenance,
        });
    }
    Ok(out)
}
