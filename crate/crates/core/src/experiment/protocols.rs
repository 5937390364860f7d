//! Protocol pipelines. Each returns typed results; `run_experiment` turns
//! them into report files.

use serde::Serialize;

use super::config::ExperimentConfig;
use super::{ExperimentError, StageExt};
use crate::augmenter::{
    filter_by_difficulty, merge, Augmenter, CandidateTriplet, FilterConfig, Provenance,
};
use crate::corpus::{expand, sample_permutations, Dataset, PreferenceExample};
use crate::injector::{corrupt_dataset, detect, ArtifactSpec, Side};
use crate::metrics::{length_report, LengthReport};
use crate::policyeval::{
    artifact_rate_curve, best_worst_pair, bon_select_with, CandidateSet, CurveRow, DpoPair, ToyPolicy,
};
use crate::rewardnet::features::{ARTIFACT_FEATURE, CONTEXTUAL_FEATURE};
use crate::rewardnet::{train, Featurizer, ModelKind, PreferenceScorer, RewardModel, ScoreError, TrainConfig};
use crate::synthlab::text::{generate_corpus, generate_pools, CandidatePool};
use crate::synthlab::{
    artifact_sensitivity, conditional_independence_stat, generate, generate_probes, instance_id,
    latent_predictions, likelihood_equivalence, reparametrize, CausalConfig, Coupling,
};
use crate::util::{stable_hash_str, unit_from_hash};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ProvenanceCounts {
    pub original: usize,
    pub non_contextual: usize,
    pub neutral: usize,
    pub total: usize,
}

impl ProvenanceCounts {
    pub fn of(data: &[CandidateTriplet]) -> Self {
        let mut c = ProvenanceCounts::default();
        for d in data {
            match d.provenance {
                Provenance::Original => c.original += 1,
                Provenance::NonContextual => c.non_contextual += 1,
                Provenance::Neutral => c.neutral += 1,
            }
        }
        c.total = data.len();
        c
    }
}

/// Originals and augmented candidates that survived the optional filter.
#[derive(Debug, Clone)]
pub struct TrainingSets {
    pub originals: Vec<CandidateTriplet>,
    pub augmented: Vec<CandidateTriplet>,
    /// Augmented candidates before filtering.
    pub generated: ProvenanceCounts,
    pub scored: Option<usize>,
}

impl TrainingSets {
    pub fn combined(&self) -> Vec<CandidateTriplet> {
        merge(self.originals.clone(), self.augmented.clone())
    }
}

/// Expand and augment `examples`; filter the augmented part with `scorer`
/// when the config enables it.
pub fn augment_examples(
    cfg: &ExperimentConfig,
    examples: Vec<PreferenceExample>,
    scorer: Option<&dyn PreferenceScorer>,
) -> Result<TrainingSets, ExperimentError> {
    let ds = Dataset::from_examples(examples).stage("load")?;
    let perms = sample_permutations(ds.len(), cfg.seeds.permutation).stage("permute")?;
    let triples = expand(&ds, &perms).stage("expand")?;
    let aug = Augmenter {
        seed: cfg.seeds.augment,
        include_neutrals: cfg.augment.include_neutrals,
    };
    let (originals, augmented) = aug.augment_all(&triples).stage("augment")?;
    let generated = ProvenanceCounts::of(&augmented);
    let (augmented, scored) = match (cfg.filter.enabled, scorer) {
        (true, Some(s)) => {
            let fc = FilterConfig {
                threshold: cfg.filter.threshold,
                sample_fraction: cfg.filter.sample_fraction,
                seed: cfg.seeds.filter,
                direction: cfg.filter.direction,
            };
            let out = filter_by_difficulty(&augmented, s, &fc).stage("filter")?;
            (out.kept, Some(out.scored))
        }
        (true, None) => return Err(ExperimentError::Config("filter enabled without a scorer".into())),
        (false, _) => (augmented, None),
    };
    Ok(TrainingSets {
        originals,
        augmented,
        generated,
        scored,
    })
}

fn fit(
    kind: ModelKind,
    featurizer: &Featurizer,
    data: &[CandidateTriplet],
    tc: &TrainConfig,
    stage: &'static str,
) -> Result<(RewardModel, f64), ExperimentError> {
    let (m, report) = train(&RewardModel::new(kind, featurizer.clone()), data, tc).stage(stage)?;
    Ok((m, report.final_loss))
}

/// RM on the originals, RRM on originals plus (filtered) augmentation.
pub struct TrainedPair {
    pub rm: RewardModel,
    pub rrm: RewardModel,
    pub rm_loss: f64,
    pub rrm_loss: f64,
    pub sets: TrainingSets,
}

pub fn train_rm_rrm(
    cfg: &ExperimentConfig,
    examples: Vec<PreferenceExample>,
    featurizer: &Featurizer,
) -> Result<TrainedPair, ExperimentError> {
    let aug = Augmenter {
        seed: cfg.seeds.augment,
        include_neutrals: cfg.augment.include_neutrals,
    };
    let originals: Vec<CandidateTriplet> = examples.iter().map(|e| aug.original(e)).collect();
    let (rm, rm_loss) = fit(cfg.model_kind, featurizer, &originals, &cfg.rm_train, "train-rm")?;
    let sets = if cfg.filter.enabled {
        match &cfg.filter.model {
            Some(p) => {
                let scorer = RewardModel::load(p).stage("filter")?.0;
                augment_examples(cfg, examples, Some(&scorer))?
            }
            None => augment_examples(cfg, examples, Some(&rm))?,
        }
    } else {
        augment_examples(cfg, examples, None)?
    };
    let (rrm, rrm_loss) = fit(cfg.model_kind, featurizer, &sets.combined(), &cfg.rrm_train, "train-rrm")?;
    Ok(TrainedPair {
        rm,
        rrm,
        rm_loss,
        rrm_loss,
        sets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub coupling: String,
    pub n: usize,
    pub gap: f64,
}

/// Likelihood gap between the artifact model (`beta_a = 1`) and its
/// artifact-free reparametrization, under perfect and independent coupling.
pub fn prop1(cfg: &ExperimentConfig) -> Result<Vec<GapRow>, ExperimentError> {
    let p = &cfg.prop1;
    let h1 = CausalConfig {
        beta_s: p.beta_s,
        beta_a: 1.0,
        alpha: p.alpha,
        sigma_s: p.sigma_s,
        sigma_a: 0.0,
        coupling: Coupling::PerfectCorr {
            beta_as: p.beta_as,
            alpha_a: p.alpha_a,
        },
        n: p.n,
        ..cfg.causal.clone()
    };
    let h0 = reparametrize(&h1).stage("prop1")?;
    let data = generate(&h1).stage("generate")?;
    let perfect = likelihood_equivalence(&h0, &h1, &data).stage("prop1")?;
    let h1i = CausalConfig {
        coupling: Coupling::Independent,
        sigma_a: p.independent_sigma_a,
        ..h1.clone()
    };
    let h0i = CausalConfig {
        coupling: Coupling::Independent,
        sigma_a: p.independent_sigma_a,
        ..h0
    };
    let data_i = generate(&h1i).stage("generate")?;
    let independent = likelihood_equivalence(&h0i, &h1i, &data_i).stage("prop1")?;
    Ok(vec![
        GapRow {
            coupling: "perfect".into(),
            n: p.n,
            gap: perfect,
        },
        GapRow {
            coupling: "independent".into(),
            n: p.n,
            gap: independent,
        },
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelDiagnostics {
    pub model: String,
    pub n_train: usize,
    pub w_contextual: f64,
    pub w_artifact: f64,
    pub sensitivity: f64,
    pub ci_stat: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop2Outcome {
    pub rm: ModelDiagnostics,
    pub rrm: ModelDiagnostics,
    pub counts: ProvenanceCounts,
}

/// Train RM and RRM on a biased synthetic corpus and measure their
/// dependence on the artifact.
pub fn prop2(cfg: &ExperimentConfig) -> Result<Prop2Outcome, ExperimentError> {
    let data = generate(&cfg.causal).stage("generate")?;
    let examples: Vec<PreferenceExample> = data
        .iter()
        .enumerate()
        .map(|(i, d)| d.to_example(instance_id(i)))
        .collect();
    let featurizer = Featurizer::synthetic();
    let tp = train_rm_rrm(cfg, examples, &featurizer)?;
    let probes = generate_probes(
        &cfg.causal,
        cfg.probes.strata,
        cfg.probes.per_stratum,
        cfg.probes.artifact_noise,
    )
    .stage("probes")?;
    let artifacts: Vec<f64> = probes.instances.iter().map(|d| d.a).collect();
    let diag = |name: &str, m: &RewardModel, n_train: usize, loss: f64| -> Result<ModelDiagnostics, ExperimentError> {
        let preds = latent_predictions(m, &probes.instances).stage("evaluate")?;
        Ok(ModelDiagnostics {
            model: name.to_string(),
            n_train,
            w_contextual: m.param(CONTEXTUAL_FEATURE).unwrap_or(0.0),
            w_artifact: m.param(ARTIFACT_FEATURE).unwrap_or(0.0),
            sensitivity: artifact_sensitivity(m, &probes.instances, cfg.probes.delta).stage("evaluate")?,
            ci_stat: conditional_independence_stat(&preds, &artifacts, &probes.strata).stage("evaluate")?,
            final_loss: loss,
        })
    };
    let n_rm = tp.sets.originals.len();
    let n_rrm = n_rm + tp.sets.augmented.len();
    let counts = ProvenanceCounts::of(&tp.sets.combined());
    Ok(Prop2Outcome {
        rm: diag("rm", &tp.rm, n_rm, tp.rm_loss)?,
        rrm: diag("rrm", &tp.rrm, n_rrm, tp.rrm_loss)?,
        counts,
    })
}

/// Text corpus with the configured artifacts injected into chosen responses.
pub fn corrupted_text_corpus(cfg: &ExperimentConfig) -> Result<Vec<PreferenceExample>, ExperimentError> {
    let mut data = generate_corpus(&cfg.text).stage("generate")?;
    for spec in &cfg.artifacts {
        data = corrupt_dataset(&data, spec, Side::Chosen, cfg.seeds.injection).0;
    }
    Ok(data)
}

pub fn eval_artifact(cfg: &ExperimentConfig) -> Result<ArtifactSpec, ExperimentError> {
    let kind = match (&cfg.curve.artifact, cfg.artifacts.last()) {
        (Some(k), _) => k.clone(),
        (None, Some(a)) => a.kind.clone(),
        (None, None) => return Err(ExperimentError::Config("no artifact configured for evaluation".into())),
    };
    ArtifactSpec::new(kind, 1.0).stage("curve")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub model: String,
    pub n: usize,
    pub rate: f64,
    pub proportion: f64,
    pub count: usize,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactOutcome {
    pub points: Vec<CurvePoint>,
    pub rm_artifact_weight: f64,
    pub rrm_artifact_weight: f64,
    pub counts: ProvenanceCounts,
}

pub fn pool_sets(pools: Vec<CandidatePool>) -> Result<Vec<CandidateSet>, ExperimentError> {
    pools
        .into_iter()
        .map(|p| CandidateSet::new(p.prompt, p.responses))
        .collect::<Result<_, _>>()
        .stage("curve")
}

/// Best-of-N artifact selection curves for RM and RRM trained on a corrupted text corpus.
pub fn artifact_curves(cfg: &ExperimentConfig) -> Result<ArtifactOutcome, ExperimentError> {
    let spec = eval_artifact(cfg)?;
    let featurizer = Featurizer::default();
    let tp = train_rm_rrm(cfg, corrupted_text_corpus(cfg)?, &featurizer)?;
    let n_max = cfg.curve.ns.iter().copied().max().unwrap_or(2);
    let sets = pool_sets(generate_pools(&cfg.text, cfg.curve.prompts, n_max, cfg.seeds.eval).stage("curve")?)?;
    let mut points = Vec::new();
    for &n in &cfg.curve.ns {
        for (name, m) in [("rm", &tp.rm), ("rrm", &tp.rrm)] {
            let rows = ruled_curve(m, &sets, &spec, &cfg.curve.rates, n, cfg.seeds.eval, cfg.curve.rule)?;
            points.extend(rows.into_iter().map(|r| CurvePoint {
                model: name.into(),
                n,
                rate: r.rate,
                proportion: r.proportion,
                count: r.count,
                half_width: r.half_width,
            }));
        }
    }
    let weight = |m: &RewardModel| m.param(&format!("artifact:{}", spec.label())).unwrap_or(0.0);
    Ok(ArtifactOutcome {
        points,
        rm_artifact_weight: weight(&tp.rm),
        rrm_artifact_weight: weight(&tp.rrm),
        counts: ProvenanceCounts::of(&tp.sets.combined()),
    })
}

/// [`artifact_rate_curve`] under any selection rule, with the same coins.
pub fn ruled_curve(
    m: &RewardModel,
    sets: &[CandidateSet],
    spec: &ArtifactSpec,
    rates: &[f64],
    n: usize,
    seed: u64,
    rule: crate::policyeval::BonRule,
) -> Result<Vec<CurveRow>, ExperimentError> {
    if rule == crate::policyeval::BonRule::TotalWin {
        return artifact_rate_curve(m, sets, spec, rates, n, seed).stage("curve");
    }
    struct Ruled<'a>(&'a RewardModel, crate::policyeval::BonRule);
    impl PreferenceScorer for Ruled<'_> {
        fn preference(&self, prompt: &str, a: &str, b: &str) -> Result<f64, ScoreError> {
            self.0.preference(prompt, a, b)
        }
        fn preference_matrix(&self, prompt: &str, c: &[String]) -> Result<Vec<Vec<f64>>, ScoreError> {
            // encode the rule's winner as the unique total-win maximizer
            let set = CandidateSet::new(prompt, c.to_vec()).map_err(|e| ScoreError::new(e.to_string()))?;
            let w = bon_select_with(self.0, &set, self.1).map_err(|e| ScoreError::new(e.to_string()))?;
            let mut out = vec![vec![0.5; c.len()]; c.len()];
            for j in (0..c.len()).filter(|&j| j != w) {
                out[w][j] = 1.0;
                out[j][w] = 0.0;
            }
            Ok(out)
        }
    }
    artifact_rate_curve(&Ruled(m, rule), sets, spec, rates, n, seed).stage("curve")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthOutcome {
    /// (name, report) per analysed dataset.
    pub reports: Vec<(String, LengthReport)>,
}

/// Length statistics of each input file (or of a generated corpus when no
/// inputs are configured) and of its augmented training set.
pub fn length_analysis(cfg: &ExperimentConfig) -> Result<LengthOutcome, ExperimentError> {
    let mut sources: Vec<(String, Vec<PreferenceExample>)> = Vec::new();
    if cfg.inputs.is_empty() {
        sources.push(("generated".into(), generate_corpus(&cfg.text).stage("generate")?));
    } else {
        for (i, p) in cfg.inputs.iter().enumerate() {
            let name = p
                .file_stem()
                .map_or_else(|| format!("input{i}"), |s| s.to_string_lossy().replace('.', "_"));
            sources.push((name, crate::corpus::load_preferences(p).stage("load")?));
        }
    }
    let mut reports = Vec::new();
    for (name, data) in sources {
        reports.push((format!("{name}_original"), length_report(&data, None).stage("length")?));
        let sets = augment_examples(cfg, data, None)?;
        reports.push((format!("{name}_augmented"), length_report(&sets.combined(), None).stage("length")?));
    }
    Ok(LengthOutcome { reports })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpoRow {
    pub model: String,
    pub pairs: usize,
    pub artifact_mass_reference: f64,
    pub artifact_mass_policy: f64,
    pub quality_reference: f64,
    pub quality_policy: f64,
    pub final_loss: f64,
}

/// Best-worst pairs chosen by RM and RRM on artifact-injected candidate
/// pools, each used to fit a toy DPO policy.
pub fn dpo_toy(cfg: &ExperimentConfig) -> Result<Vec<DpoRow>, ExperimentError> {
    let spec = eval_artifact(cfg)?;
    let tp = train_rm_rrm(cfg, corrupted_text_corpus(cfg)?, &Featurizer::default())?;
    let pools = generate_pools(&cfg.text, cfg.dpo.prompts, cfg.dpo.candidates, cfg.seeds.eval).stage("dpo")?;
    let pools: Vec<CandidatePool> = pools
        .into_iter()
        .enumerate()
        .map(|(k, mut p)| {
            for (j, r) in p.responses.iter_mut().enumerate() {
                let coin = unit_from_hash(stable_hash_str(
                    cfg.seeds.eval,
                    &["dpo-inject", &k.to_string(), &j.to_string()],
                ));
                if coin < cfg.dpo.rate {
                    *r = spec.apply(r);
                }
            }
            p
        })
        .collect();
    let sets = pool_sets(pools.clone())?;
    let sizes: Vec<usize> = sets.iter().map(|s| s.candidates.len()).collect();
    let reference = ToyPolicy::uniform(&sizes).stage("dpo")?;
    let mass = |pol: &ToyPolicy| {
        let (mut art, mut qual) = (0.0, 0.0);
        for (k, pool) in pools.iter().enumerate() {
            for (j, p) in pol.probs(k).iter().enumerate() {
                if detect(&pool.responses[j], &spec) {
                    art += p;
                }
                qual += p * pool.qualities[j];
            }
        }
        (art / pools.len() as f64, qual / pools.len() as f64)
    };
    let (art_ref, qual_ref) = mass(&reference);
    let mut rows = Vec::new();
    for (name, m) in [("rm", &tp.rm), ("rrm", &tp.rrm)] {
        let mut pairs = Vec::new();
        for (k, s) in sets.iter().enumerate() {
            match best_worst_pair(m, s) {
                Ok((chosen, rejected)) => pairs.push(DpoPair {
                    prompt: k,
                    chosen,
                    rejected,
                }),
                Err(crate::policyeval::PolicyError::Degenerate) => {}
                Err(e) => return Err(e).stage("dpo"),
            }
        }
        let (pol, report) =
            crate::policyeval::dpo_train(&reference, &pairs, &cfg.dpo.train, cfg.dpo.beta).stage("dpo")?;
        let (art, qual) = mass(&pol);
        rows.push(DpoRow {
            model: name.into(),
            pairs: pairs.len(),
            artifact_mass_reference: art_ref,
            artifact_mass_policy: art,
            quality_reference: qual_ref,
            quality_policy: qual,
            final_loss: report.loss_trace.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}
