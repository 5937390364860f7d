//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//! Exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rrm_core::augmenter::{Augmenter, CandidateTriplet, PrefLabel, Provenance, ResponseOrigin, Role};
use rrm_core::corpus::{ExampleTriple, PreferenceExample};
use rrm_core::experiment::config::ExperimentConfig;
use rrm_core::experiment::protocols::{artifact_curves, prop2, CurvePoint};
use rrm_core::experiment::{run_experiment, PROTOCOLS};
use rrm_core::metrics::length_report;
use rrm_core::policyeval::{dpo_grad, dpo_loss, dpo_objective, dpo_train, DpoPair, ToyPolicy};
use rrm_core::rewardnet::features::format_vector;
use rrm_core::rewardnet::{grad, loss, Featurizer, ModelKind, RewardModel, TrainConfig};
use rrm_core::synthlab::text::{generate_corpus, TextCorpusConfig};
use rrm_core::synthlab::{generate, likelihood_equivalence, reparametrize, CausalConfig, Coupling};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Slot {
    Base,
    Peer1,
    Peer2,
}

type Resp = (Slot, Role);

// rows of the augmentation table, first response listed as written
const NON_CONTEXTUAL: [(Resp, Resp); 8] = [
    ((Slot::Base, Role::W), (Slot::Peer1, Role::W)),
    ((Slot::Base, Role::W), (Slot::Peer2, Role::W)),
    ((Slot::Base, Role::W), (Slot::Peer1, Role::L)),
    ((Slot::Base, Role::W), (Slot::Peer2, Role::L)),
    ((Slot::Base, Role::L), (Slot::Peer1, Role::W)),
    ((Slot::Base, Role::L), (Slot::Peer2, Role::W)),
    ((Slot::Base, Role::L), (Slot::Peer1, Role::L)),
    ((Slot::Base, Role::L), (Slot::Peer2, Role::L)),
];

const NEUTRAL: [(Resp, Resp); 6] = [
    ((Slot::Peer1, Role::W), (Slot::Peer1, Role::L)),
    ((Slot::Peer2, Role::W), (Slot::Peer2, Role::L)),
    ((Slot::Peer1, Role::W), (Slot::Peer2, Role::W)),
    ((Slot::Peer1, Role::W), (Slot::Peer2, Role::L)),
    ((Slot::Peer2, Role::W), (Slot::Peer1, Role::L)),
    ((Slot::Peer1, Role::L), (Slot::Peer2, Role::L)),
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..12);
    (0..n)
        .map(|_| format!("t{}", rng.random_range(0..50)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_example(rng: &mut ChaCha8Rng, id: String) -> PreferenceExample {
    PreferenceExample::new(id, random_text(rng), random_text(rng), random_text(rng))
}

fn origin(t: &ExampleTriple, (slot, role): Resp) -> ResponseOrigin {
    let ex = match slot {
        Slot::Base => &t.base,
        Slot::Peer1 => &t.peer1,
        Slot::Peer2 => &t.peer2,
    };
    ResponseOrigin::new(ex.id.clone(), role)
}

fn text_of<'a>(t: &'a ExampleTriple, o: &ResponseOrigin) -> &'a str {
    let ex = [&t.base, &t.peer1, &t.peer2]
        .into_iter()
        .find(|e| e.id == o.example_id)
        .expect("origin within triple");
    match o.role {
        Role::W => &ex.chosen,
        Role::L => &ex.rejected,
    }
}

type Side = (String, bool);

/// Orientation-free description: (prompt id, unordered pair, winner or none).
fn canonical(c: &CandidateTriplet) -> (String, BTreeSet<Side>, Option<Side>) {
    let key = |o: &ResponseOrigin| (o.example_id.clone(), o.role == Role::W);
    let pair = [key(&c.a_origin), key(&c.b_origin)].into_iter().collect();
    let winner = match c.label.value() {
        1.0 => Some(key(&c.a_origin)),
        0.0 => Some(key(&c.b_origin)),
        _ => None,
    };
    (c.prompt_id.clone(), pair, winner)
}

fn row_matches(t: &ExampleTriple, c: &CandidateTriplet, first: Resp, second: Resp, tie: bool) -> bool {
    let (o1, o2) = (origin(t, first), origin(t, second));
    let label = c.label.value();
    let oriented = if c.a_origin == o1 && c.b_origin == o2 {
        label == if tie { 0.5 } else { 1.0 }
    } else if c.a_origin == o2 && c.b_origin == o1 {
        label == if tie { 0.5 } else { 0.0 }
    } else {
        false
    };
    oriented
        && c.prompt == t.base.prompt
        && c.prompt_id == t.base.id
        && c.response_a == text_of(t, &c.a_origin)
        && c.response_b == text_of(t, &c.b_origin)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let aug = Augmenter::new(11);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let t = ExampleTriple::new(
            random_example(&mut rng, format!("b{i}")),
            random_example(&mut rng, format!("p{i}")),
            random_example(&mut rng, format!("q{i}")),
        );
        let rows = aug.augment_example(&t).expect("distinct triple");
        let expected = NON_CONTEXTUAL
            .iter()
            .map(|r| (r, false, Provenance::NonContextual))
            .chain(NEUTRAL.iter().map(|r| (r, true, Provenance::Neutral)));
        let rows_ok = rows.len() == 14
            && rows
                .iter()
                .zip(expected)
                .all(|(c, ((a, b), tie, prov))| c.provenance == prov && row_matches(&t, c, *a, *b, tie));
        let all = aug.enumerate_all(&t).expect("distinct triple");
        let restricted: BTreeSet<_> = all.iter().filter(|c| c.prompt_id == t.base.id).map(canonical).collect();
        let mut local: BTreeSet<_> = rows.iter().map(canonical).collect();
        local.insert(canonical(&aug.original(&t.base)));
        if !rows_ok || all.len() != 45 || restricted != local {
            failures.push(i);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures.is_empty() && elapsed < Duration::from_secs(1),
        format!("1000 triples, {} mismatches, {:.3} s", failures.len(), elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let h1 = CausalConfig {
        beta_s: 1.5,
        beta_a: 1.0,
        alpha: -0.25,
        sigma_s: 0.5,
        coupling: Coupling::PerfectCorr {
            beta_as: 2.0,
            alpha_a: 1.0,
        },
        n: 100_000,
        seed: 21,
        ..CausalConfig::default()
    };
    let h0 = reparametrize(&h1).expect("perfect coupling");
    let data = generate(&h1).expect("valid config");
    let perfect = likelihood_equivalence(&h0, &h1, &data).expect("same coupling");
    let indep = |c: &CausalConfig| CausalConfig {
        coupling: Coupling::Independent,
        sigma_a: 1.0,
        ..c.clone()
    };
    let data_i = generate(&indep(&h1)).expect("valid config");
    let independent = likelihood_equivalence(&indep(&h0), &indep(&h1), &data_i).expect("same coupling");
    let elapsed = start.elapsed();
    verdict(
        h0.beta_a == 0.0 && perfect <= 1e-12 && independent > 0.01 && elapsed < Duration::from_secs(10),
        format!(
            "perfect gap {perfect:.3e}, independent gap {independent:.4}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let cfg = ExperimentConfig::for_protocol("prop2").expect("known protocol");
    let out = prop2(&cfg).expect("prop2 runs");
    let elapsed = start.elapsed();
    let ratio = out.rrm.sensitivity / out.rm.sensitivity;
    verdict(
        cfg.causal.beta_s == 2.0
            && cfg.causal.beta_a == 2.0
            && cfg.causal.n == 20_000
            && ratio < 0.2
            && out.rrm.ci_stat < 0.1
            && out.rm.ci_stat > 0.3
            && elapsed < Duration::from_secs(120),
        format!(
            "sensitivity RM {:.4} RRM {:.4} (ratio {ratio:.3}); CI stat RM {:.3} RRM {:.3}; {:.1} s",
            out.rm.sensitivity,
            out.rrm.sensitivity,
            out.rm.ci_stat,
            out.rrm.ci_stat,
            elapsed.as_secs_f64()
        ),
    )
}

/// RM: lower band edge at rate 0.1 at least 0.15 above the rate.
/// RRM: whole band within 0.05 of the rate at every grid point.
fn curve_ok(points: &[CurvePoint], n: usize) -> (bool, String) {
    let at = |model: &str| -> Vec<&CurvePoint> { points.iter().filter(|p| p.model == model && p.n == n).collect() };
    let rm = at("rm");
    let rrm = at("rrm");
    let rm_hit = rm.iter().find(|p| (p.rate - 0.1).abs() < 1e-12);
    let rm_ok = rm_hit.is_some_and(|p| p.proportion - p.half_width - p.rate >= 0.15);
    let worst = rrm
        .iter()
        .map(|p| (p.proportion - p.rate).abs() + p.half_width)
        .fold(0.0, f64::max);
    let grid: Vec<f64> = rrm.iter().map(|p| p.rate).collect();
    let ok = rm_ok && worst <= 0.05 && grid == [0.05, 0.1, 0.2, 0.5];
    let detail = format!(
        "N={n}: RM {:.3}±{:.3} at 0.1, RRM worst |p-r|+hw {worst:.3}",
        rm_hit.map_or(f64::NAN, |p| p.proportion),
        rm_hit.map_or(f64::NAN, |p| p.half_width),
    );
    (ok, detail)
}

fn criterion_4() -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for protocol in ["artifact-curve", "mixed-artifact"] {
        let start = Instant::now();
        let cfg = ExperimentConfig::for_protocol(protocol).expect("known protocol");
        let out = artifact_curves(&cfg).expect("curves run");
        let elapsed = start.elapsed();
        pass &= elapsed < Duration::from_secs(120);
        let mut parts = Vec::new();
        for &n in &cfg.curve.ns {
            let (ok, d) = curve_ok(&out.points, n);
            pass &= ok;
            parts.push(d);
        }
        details.push(format!("{protocol} [{}] {:.1} s", parts.join("; "), elapsed.as_secs_f64()));
    }
    verdict(pass, details.join(" | "))
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn reward_draw(rng: &mut ChaCha8Rng, draw: usize) -> f64 {
    let kind = if draw.is_multiple_of(2) {
        ModelKind::BradleyTerry
    } else {
        ModelKind::PairwiseRanker
    };
    let init = RewardModel::new(kind, Featurizer::synthetic());
    let dim = rng.random_range(2..6);
    let batch: Vec<CandidateTriplet> = (0..rng.random_range(1..30))
        .map(|k| {
            let label = [PrefLabel::FIRST, PrefLabel::TIE, PrefLabel::SECOND][rng.random_range(0..3)];
            CandidateTriplet {
                id: format!("g{k}"),
                prompt_id: format!("g{k}"),
                prompt: format_vector(&normal_vec(rng, dim)),
                response_a: format_vector(&normal_vec(rng, dim)),
                response_b: format_vector(&normal_vec(rng, dim)),
                a_origin: ResponseOrigin::new(format!("g{k}"), Role::W),
                b_origin: ResponseOrigin::new(format!("g{k}"), Role::L),
                label,
                provenance: Provenance::Original,
            }
        })
        .collect();
    let params = normal_vec(rng, init.params.len());
    let model = init.with_params(params).expect("matching length");
    let l2 = 1e-3;
    let objective = |m: &RewardModel| {
        loss(m, &batch).expect("finite") + 0.5 * l2 * m.params.iter().map(|p| p * p).sum::<f64>()
    };
    let analytic = grad(&model, &batch, l2).expect("finite");
    let eps = 1e-5;
    let numeric: Vec<f64> = (0..model.params.len())
        .map(|k| {
            let mut plus = model.clone();
            plus.params[k] += eps;
            let mut minus = model.clone();
            minus.params[k] -= eps;
            (objective(&plus) - objective(&minus)) / (2.0 * eps)
        })
        .collect();
    rel_error(&analytic, &numeric)
}

fn dpo_draw(rng: &mut ChaCha8Rng) -> f64 {
    let prompts = rng.random_range(1..5);
    let reference: Vec<Vec<f64>> = (0..prompts)
        .map(|_| {
            let k = rng.random_range(2..6);
            normal_vec(rng, k)
        })
        .collect();
    let start = ToyPolicy::new(reference.clone()).expect("finite logits");
    let logits: Vec<Vec<f64>> = reference.iter().map(|l| normal_vec(rng, l.len())).collect();
    let pol = start.with_logits(logits).expect("same shape");
    let pairs: Vec<DpoPair> = (0..rng.random_range(1..10))
        .map(|_| {
            let prompt = rng.random_range(0..prompts);
            let k = reference[prompt].len();
            let chosen = rng.random_range(0..k);
            let rejected = (chosen + rng.random_range(1..k)) % k;
            DpoPair { prompt, chosen, rejected }
        })
        .collect();
    let beta = rng.random_range(0.05..2.0);
    let l2 = 1e-2;
    let analytic: Vec<f64> = dpo_grad(&pol, &pairs, beta, l2).expect("valid").concat();
    let eps = 1e-5;
    let flat: Vec<f64> = pol.logits().concat();
    let shape: Vec<usize> = pol.logits().iter().map(Vec::len).collect();
    let rebuild = |v: &[f64]| {
        let mut out = Vec::new();
        let mut at = 0;
        for &n in &shape {
            out.push(v[at..at + n].to_vec());
            at += n;
        }
        pol.with_logits(out).expect("same shape")
    };
    let numeric: Vec<f64> = (0..flat.len())
        .map(|k| {
            let mut plus = flat.clone();
            plus[k] += eps;
            let mut minus = flat.clone();
            minus[k] -= eps;
            let f = |v: &[f64]| dpo_objective(&rebuild(v), &pairs, beta, l2).expect("finite");
            (f(&plus) - f(&minus)) / (2.0 * eps)
        })
        .collect();
    rel_error(&analytic, &numeric)
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let reward_worst = (0..100).map(|d| reward_draw(&mut rng, d)).fold(0.0, f64::max);
    let dpo_worst = (0..100).map(|_| dpo_draw(&mut rng)).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    verdict(
        reward_worst <= 1e-5 && dpo_worst <= 1e-5 && elapsed < Duration::from_secs(10),
        format!(
            "worst relative error reward {reward_worst:.2e}, dpo {dpo_worst:.2e}; {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let reference: Vec<Vec<f64>> = (0..20).map(|_| normal_vec(&mut rng, 6)).collect();
    let pol = ToyPolicy::new(reference).expect("finite logits");
    let mut worst_init: f64 = 0.0;
    for prompt in 0..20 {
        for chosen in 0..6 {
            for rejected in (0..6).filter(|&r| r != chosen) {
                let l = dpo_loss(&pol, &DpoPair { prompt, chosen, rejected }, 0.1).expect("valid");
                worst_init = worst_init.max((l - std::f64::consts::LN_2).abs());
            }
        }
    }
    let tc = TrainConfig {
        learning_rate: 0.5,
        epochs: 200,
        batch_size: 1,
        seed: 6,
        l2: 0.0,
    };
    let mut min_margin = f64::INFINITY;
    let mut monotone = true;
    let mut last_loss: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(2..8);
        let single = ToyPolicy::new(vec![normal_vec(&mut rng, k)]).expect("finite logits");
        let chosen = rng.random_range(0..k);
        let rejected = (chosen + rng.random_range(1..k)) % k;
        let pair = DpoPair {
            prompt: 0,
            chosen,
            rejected,
        };
        let (trained, report) = dpo_train(&single, &[pair], &tc, 0.1).expect("trains");
        min_margin = min_margin.min(trained.logits()[0][chosen] - trained.logits()[0][rejected]);
        let trace = &report.loss_trace;
        monotone &= trace[trace.len() / 2..].windows(2).all(|w| w[1] <= w[0]);
        last_loss = last_loss.max(trace[trace.len() - 1]);
    }
    verdict(
        worst_init <= 1e-12 && min_margin > 0.0 && monotone,
        format!(
            "max |init loss - ln 2| {worst_init:.1e}; 20 single pairs: min margin {min_margin:.3}, \
             worst final loss {last_loss:.4}, tail nonincreasing: {monotone}"
        ),
    )
}

fn criterion_7() -> Verdict {
    let cfg = TextCorpusConfig {
        n: 5000,
        chosen_longer: Some(0.6),
        seed: 77,
        ..TextCorpusConfig::default()
    };
    let data = generate_corpus(&cfg).expect("valid config");
    let rep = length_report(&data, None).expect("nonempty");
    let n = rep.n as f64;
    let sigma = (0.6 * 0.4 / n).sqrt();
    let within = (rep.longer_fraction - 0.6).abs() <= 3.0 * sigma;
    let counts: usize = [rep.longer_fraction, rep.shorter_fraction, rep.equal_fraction]
        .iter()
        .map(|f| (f * n).round() as usize)
        .sum();
    let normalized = counts == rep.n
        && (rep.longer_fraction + rep.shorter_fraction + rep.equal_fraction - 1.0).abs() <= 2.0 * f64::EPSILON;
    let mass = rep.chosen_hist.iter().sum::<usize>() == rep.n && rep.rejected_hist.iter().sum::<usize>() == rep.n;
    verdict(
        within && normalized && mass,
        format!(
            "longer fraction {:.4} (3 sigma {:.4}), fractions sum to n: {normalized}, histogram mass: {mass}",
            rep.longer_fraction,
            3.0 * sigma
        ),
    )
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::for_protocol("prop2").expect("known protocol");
    cfg.augment.include_neutrals = false;
    let out = prop2(&cfg).expect("prop2 runs");
    let elapsed = start.elapsed();
    let ratio = out.rrm.sensitivity / out.rm.sensitivity;
    let n = cfg.causal.n;
    verdict(
        out.counts.total == 9 * n && out.counts.neutral == 0 && ratio < 0.35 && elapsed < Duration::from_secs(120),
        format!(
            "{} training candidates for n = {n}; sensitivity ratio {ratio:.3}; {:.1} s",
            out.counts.total,
            elapsed.as_secs_f64()
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("bundle directory")
        .map(|e| {
            let p = e.expect("dir entry").path();
            (
                p.file_name().expect("file name").to_string_lossy().into_owned(),
                std::fs::read(&p).expect("readable"),
            )
        })
        .collect()
}

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let tmp = tempfile::tempdir().expect("temp dir");
    let small = [
        "prop1.n=5000",
        "causal.n=2000",
        "probes.strata=20",
        "probes.per_stratum=50",
        "text.n=400",
        "curve.prompts=200",
        "dpo.prompts=50",
        "dpo.train.epochs=10",
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for protocol in PROTOCOLS {
        let mut overrides = vec![format!("protocol=\"{protocol}\"")];
        overrides.extend(small.iter().map(|s| s.to_string()));
        overrides.push(format!("output_dir=\"{}\"", tmp.path().join(protocol).display()));
        let (cfg, applied) = ExperimentConfig::from_toml("", &overrides).expect("valid overrides");
        run_experiment(&cfg, &applied).expect("first run");
        let first = snapshot(&cfg.output_dir);
        std::fs::remove_dir_all(&cfg.output_dir).expect("clean");
        run_experiment(&cfg, &applied).expect("second run");
        let second = snapshot(&cfg.output_dir);
        files += first.len();
        if first != second || first.is_empty() {
            differing.push(protocol);
        }
    }
    verdict(
        differing.is_empty(),
        format!(
            "{} protocols, {files} files, differing: {differing:?}; {:.1} s",
            PROTOCOLS.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check); 9] = [
        ("augmentation cardinality and labels", criterion_1),
        ("likelihood equivalence under perfect coupling", criterion_2),
        ("augmented training removes artifact dependence", criterion_3),
        ("best-of-N artifact selection curves", criterion_4),
        ("gradients match finite differences", criterion_5),
        ("DPO initialization and single-pair training", criterion_6),
        ("length diagnostics", criterion_7),
        ("ablation without neutral pairs", criterion_8),
        ("byte-identical reruns", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {} {}: {} ({})",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
