//! Synthetic text preference corpora.
//!
//! Each prompt asks about a handful of topic words. A response of quality
//! `q` draws each token from the prompt's topic with probability `q` and
//! from a filler vocabulary otherwise, so prompt overlap tracks quality.
//! Preferences follow `P(y1 > y2) = sigmoid(kappa * (q1 - q2))`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::corpus::PreferenceExample;
use crate::util::{rng_from, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextCorpusConfig {
    pub n: usize,
    pub seed: u64,
    pub topic_words: usize,
    pub vocab: usize,
    pub filler_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_quality: f64,
    pub max_quality: f64,
    pub kappa: f64,
    /// When set, exactly this fraction of examples (rounded) has a strictly
    /// longer chosen response and the rest a strictly shorter one.
    pub chosen_longer: Option<f64>,
}

impl Default for TextCorpusConfig {
    fn default() -> Self {
        TextCorpusConfig {
            n: 1000,
            seed: 0,
            topic_words: 8,
            vocab: 2000,
            filler_vocab: 500,
            min_len: 10,
            max_len: 40,
            min_quality: 0.1,
            max_quality: 0.9,
            kappa: 8.0,
            chosen_longer: None,
        }
    }
}

impl TextCorpusConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.topic_words == 0 || self.vocab < self.topic_words || self.filler_vocab == 0 {
            return bad("vocabularies must be non-empty and hold the topic words");
        }
        if self.min_len == 0 || self.max_len <= self.min_len {
            return bad("need 0 < min_len < max_len");
        }
        if !(0.0..=1.0).contains(&self.min_quality)
            || !(0.0..=1.0).contains(&self.max_quality)
            || self.min_quality > self.max_quality
        {
            return bad("need 0 <= min_quality <= max_quality <= 1");
        }
        if !self.kappa.is_finite() {
            return bad("kappa must be finite");
        }
        if let Some(f) = self.chosen_longer {
            if !(0.0..=1.0).contains(&f) {
                return bad("chosen_longer must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// A prompt with candidate responses and their nominal qualities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub prompt: String,
    pub responses: Vec<String>,
    /// Empty when unknown.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub qualities: Vec<f64>,
}

struct Writer<'a> {
    cfg: &'a TextCorpusConfig,
    rng: ChaCha8Rng,
}

impl Writer<'_> {
    fn topic(&mut self) -> Vec<String> {
        rand::seq::index::sample(&mut self.rng, self.cfg.vocab, self.cfg.topic_words)
            .into_iter()
            .map(|k| format!("w{k}"))
            .collect()
    }

    fn prompt(topic: &[String]) -> String {
        format!("tell me about {}", topic.join(" "))
    }

    fn quality(&mut self) -> f64 {
        self.rng.random_range(self.cfg.min_quality..=self.cfg.max_quality)
    }

    fn length(&mut self) -> usize {
        self.rng.random_range(self.cfg.min_len..=self.cfg.max_len)
    }

    fn response(&mut self, topic: &[String], quality: f64, len: usize) -> String {
        (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < quality {
                    topic[self.rng.random_range(0..topic.len())].clone()
                } else {
                    format!("f{}", self.rng.random_range(0..self.cfg.filler_vocab))
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Pairwise preference corpus with ids `txt-{i}`.
pub fn generate_corpus(cfg: &TextCorpusConfig) -> Result<Vec<PreferenceExample>, SynthError> {
    cfg.validate()?;
    let mut w = Writer {
        cfg,
        rng: rng_from(cfg.seed, &["text-corpus"]),
    };
    let longer: Vec<bool> = match cfg.chosen_longer {
        Some(f) => {
            let k = (f * cfg.n as f64).round() as usize;
            let mut flags: Vec<bool> = (0..cfg.n).map(|i| i < k).collect();
            flags.shuffle(&mut w.rng);
            flags
        }
        None => Vec::new(),
    };
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let topic = w.topic();
        let (q1, q2) = (w.quality(), w.quality());
        let first_wins = w.rng.random::<f64>() < sigmoid(cfg.kappa * (q1 - q2));
        let (qw, ql) = if first_wins { (q1, q2) } else { (q2, q1) };
        let (lw, ll) = match longer.get(i) {
            None => (w.length(), w.length()),
            Some(&chosen_longer) => {
                let (mut a, mut b) = (w.length(), w.length());
                while a == b {
                    b = w.length();
                }
                if a < b {
                    std::mem::swap(&mut a, &mut b);
                }
                if chosen_longer {
                    (a, b)
                } else {
                    (b, a)
                }
            }
        };
        let chosen = w.response(&topic, qw, lw);
        let rejected = w.response(&topic, ql, ll);
        out.push(PreferenceExample::new(format!("txt-{i}"), Writer::prompt(&topic), chosen, rejected));
    }
    Ok(out)
}

/// `n_prompts` fresh prompts with `per_prompt` responses each, for best-of-N
/// and policy experiments. Uses `seed`, not `cfg.seed`.
pub fn generate_pools(
    cfg: &TextCorpusConfig,
    n_prompts: usize,
    per_prompt: usize,
    seed: u64,
) -> Result<Vec<CandidatePool>, SynthError> {
    cfg.validate()?;
    let mut w = Writer {
        cfg,
        rng: rng_from(seed, &["text-pools"]),
    };
    Ok((0..n_prompts)
        .map(|_| {
            let topic = w.topic();
            let qualities: Vec<f64> = (0..per_prompt).map(|_| w.quality()).collect();
            let responses = qualities
                .iter()
                .map(|&q| {
                    let len = w.length();
                    w.response(&topic, q, len)
                })
                .collect();
            CandidatePool {
                prompt: Writer::prompt(&topic),
                responses,
                qualities,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::token_count;

    #[test]
    fn exact_longer_fraction() {
        let cfg = TextCorpusConfig {
            n: 500,
            chosen_longer: Some(0.6),
            ..Default::default()
        };
        let data = generate_corpus(&cfg).unwrap();
        let longer = data
            .iter()
            .filter(|e| token_count(&e.chosen) > token_count(&e.rejected))
            .count();
        assert_eq!(longer, 300);
        assert!(data.iter().all(|e| token_count(&e.chosen) != token_count(&e.rejected)));
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = TextCorpusConfig { n: 50, ..Default::default() };
        let a = generate_corpus(&cfg).unwrap();
        assert_eq!(a, generate_corpus(&cfg).unwrap());
        assert!(a.iter().all(|e| !e.prompt.is_empty() && !e.chosen.is_empty() && !e.rejected.is_empty()));
    }

    #[test]
    fn chosen_tends_to_overlap_more() {
        use crate::rewardnet::features::content_tokens;
        let cfg = TextCorpusConfig { n: 2000, ..Default::default() };
        let overlap = |p: &str, r: &str| {
            let vocab: std::collections::HashSet<String> = content_tokens(p).into_iter().collect();
            let t = content_tokens(r);
            t.iter().filter(|x| vocab.contains(*x)).count() as f64 / t.len() as f64
        };
        let wins = generate_corpus(&cfg)
            .unwrap()
            .iter()
            .filter(|e| overlap(&e.prompt, &e.chosen) > overlap(&e.prompt, &e.rejected))
            .count();
        assert!(wins > 1400, "wins = {wins}");
    }

    #[test]
    fn pools_have_requested_shape() {
        let pools = generate_pools(&TextCorpusConfig::default(), 7, 5, 3).unwrap();
        assert_eq!(pools.len(), 7);
        assert!(pools.iter().all(|p| p.responses.len() == 5 && p.qualities.len() == 5));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TextCorpusConfig { min_len: 5, max_len: 5, ..Default::default() };
        assert!(generate_corpus(&cfg).is_err());
    }
}
