//! `rrm`: command-line front end for the robust reward model pipeline.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use rrm_core::augmenter::{
    filter_by_difficulty, merge, read_candidates, write_candidates, Augmenter, CandidateTriplet, FilterConfig,
    Provenance,
};
use rrm_core::corpus::{load_preferences, save_preferences, PreferenceExample};
use rrm_core::experiment::protocols::{eval_artifact, pool_sets, ruled_curve};
use rrm_core::experiment::{run_augment, run_experiment, ExperimentConfig, ExperimentError, StageExt};
use rrm_core::injector::{corrupt_dataset, ArtifactSpec, Side};
use rrm_core::metrics::{length_report, render_report, Report};
use rrm_core::policyeval::{best_worst_pair, bon_select_with, dpo_train, DpoPair, PolicyError, ToyPolicy};
use rrm_core::rewardnet::{evaluate, train, Featurizer, ModelError, RewardModel};
use rrm_core::synthlab::text::{generate_corpus, generate_pools, CandidatePool};
use rrm_core::synthlab::{generate, write_synthetic};

type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Parser)]
#[command(name = "rrm", version, about = "Robust reward model training and artifact evaluation")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; protocol defaults fill in missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set rm_train.epochs=50`. Repeatable; last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Expand, augment, optionally filter and merge a preference file.
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input preference file (replaces `inputs`).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Keep augmented candidates whose model gap passes the filter.
    Filter {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a reward model and save a checkpoint.
    TrainRm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Use the `rrm_train` settings instead of `rm_train`.
        #[arg(long)]
        rrm: bool,
        #[arg(long, value_enum, default_value_t = FeaturizerArg::Text)]
        featurizer: FeaturizerArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, tie gap and loss of a checkpoint.
    EvalRm {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Generate a synthetic corpus or candidate pools.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = SynthKind::Causal)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject the configured artifacts into a preference file.
    Inject {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        /// Preset to inject instead of the configured list.
        #[arg(long, requires = "rate")]
        preset: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, value_enum, default_value_t = SideArg::Chosen)]
        side: SideArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-of-N selection over candidate pools.
    Bon {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        /// Use the first N candidates of each pool.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit a toy tabular policy with DPO on the model's best-worst pairs.
    Dpo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        /// Per-prompt policy probabilities as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-of-N artifact selection proportion over the configured rate grid.
    Curve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        /// Evaluation artifact preset (default: from the config).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chosen/rejected length statistics.
    Stats {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Print the histogram instead of the summary.
        #[arg(long)]
        histogram: bool,
    },
    /// Run a named protocol and write its report bundle.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set protocol=NAME`, applied before other overrides.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataArgs {
    /// Preference file; each example counts as one original candidate.
    #[arg(long)]
    preferences: Option<PathBuf>,
    /// Candidate file as written by `augment`.
    #[arg(long)]
    candidates: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeaturizerArg {
    Text,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Vector-encoded causal corpus with latent `s` and `a`.
    Causal,
    /// Topic-word text corpus.
    Text,
    /// Candidate pools for `bon`, `dpo` and `curve`.
    Pools,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Chosen,
    Rejected,
    Both,
}

fn load_config(args: &ConfigArgs, leading: &[String]) -> Result<(ExperimentConfig, Vec<String>)> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| ExperimentError::io(p, e))?,
        None => String::new(),
    };
    let all: Vec<String> = leading.iter().chain(&args.overrides).cloned().collect();
    ExperimentConfig::from_toml(&text, &all)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ExperimentError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| ExperimentError::io(path, e))
}

// a closed stdout (e.g. piped into `head`) is not an error
fn print_json(v: &serde_json::Value) {
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn load_data(args: &DataArgs, seed: u64) -> Result<Vec<CandidateTriplet>> {
    match (&args.preferences, &args.candidates) {
        (Some(p), _) => {
            let aug = Augmenter::new(seed);
            Ok(load_preferences(p).stage("load")?.iter().map(|e| aug.original(e)).collect())
        }
        (None, Some(p)) => {
            let f = File::open(p).map_err(|e| ExperimentError::io(p, e))?;
            read_candidates(BufReader::new(f)).stage("load")
        }
        (None, None) => Err(ExperimentError::Config("give --preferences or --candidates".into())),
    }
}

fn load_pools(path: &Path) -> Result<Vec<CandidatePool>> {
    let f = File::open(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ExperimentError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pool: CandidatePool = serde_json::from_str(&line).map_err(|e| {
            ExperimentError::Stage {
                stage: "load",
                source: Box::new(ExperimentError::Policy(PolicyError::Config(format!(
                    "{}:{}: {e}",
                    path.display(),
                    i + 1
                )))),
            }
        })?;
        out.push(pool);
    }
    Ok(out)
}

fn load_model(path: &Path) -> Result<RewardModel> {
    match RewardModel::load(path) {
        Ok((m, _)) => Ok(m),
        Err(ModelError::Io(e)) => Err(ExperimentError::io(path, e)),
        Err(e) => Err(e).stage("load-model"),
    }
}

fn preset(name: &str, p: f64) -> Result<ArtifactSpec> {
    ArtifactSpec::preset(name, p).map_err(|e| ExperimentError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Augment { cfg, input, out_dir } => {
            let (mut c, _) = load_config(&cfg, &[])?;
            if let Some(i) = input {
                c.inputs = vec![i];
            }
            if let Some(d) = out_dir {
                c.output_dir = d;
            }
            let s = run_augment(&c, &Featurizer::default())?;
            print_json(&json!({
                "output": s.output,
                "counts": s.counts,
                "scored": s.scored,
            }));
        }
        Command::Filter {
            cfg,
            candidates,
            model,
            out,
        } => {
            let (c, _) = load_config(&cfg, &[])?;
            let all = load_data(
                &DataArgs {
                    preferences: None,
                    candidates: Some(candidates),
                },
                c.seeds.augment,
            )?;
            let scorer = load_model(&model)?;
            let (originals, augmented): (Vec<_>, Vec<_>) =
                all.into_iter().partition(|t| t.provenance == Provenance::Original);
            let fc = FilterConfig {
                threshold: c.filter.threshold,
                sample_fraction: c.filter.sample_fraction,
                seed: c.seeds.filter,
                direction: c.filter.direction,
            };
            let outcome = filter_by_difficulty(&augmented, &scorer, &fc).stage("filter")?;
            let n_orig = originals.len();
            let n_kept = outcome.kept.len();
            let merged = merge(originals, outcome.kept);
            let mut w = create(&out)?;
            write_candidates(&mut w, &merged).map_err(|e| ExperimentError::io(&out, e))?;
            finish(w, &out)?;
            print_json(&json!({
                "originals": n_orig,
                "augmented": augmented.len(),
                "scored": outcome.scored,
                "kept": n_kept,
            }));
        }
        Command::TrainRm {
            cfg,
            data,
            rrm,
            featurizer,
            out,
        } => {
            let (c, _) = load_config(&cfg, &[])?;
            let rows = load_data(&data, c.seeds.augment)?;
            let feat = match featurizer {
                FeaturizerArg::Text => Featurizer::default(),
                FeaturizerArg::Synthetic => Featurizer::synthetic(),
            };
            let tc = if rrm { &c.rrm_train } else { &c.rm_train };
            let (m, report) = train(&RewardModel::new(c.model_kind, feat), &rows, tc).stage("train")?;
            m.save(&out, Some(tc)).stage("save")?;
            print_json(&json!({
                "checkpoint": out,
                "n_train": rows.len(),
                "initial_loss": report.initial_loss,
                "final_loss": report.final_loss,
                "steps": report.steps,
            }));
        }
        Command::EvalRm { data, model } => {
            let m = load_model(&model)?;
            let rows = load_data(&data, 0)?;
            let e = evaluate(&m, &rows).stage("eval")?;
            print_json(&json!({
                "n": rows.len(),
                "accuracy": e.accuracy,
                "decisive": e.decisive,
                "tie_gap": e.tie_gap,
                "ties": e.ties,
                "mean_loss": e.mean_loss,
            }));
        }
        Command::Synth { cfg, kind, out } => {
            let (c, _) = load_config(&cfg, &[])?;
            let mut w = create(&out)?;
            let n = match kind {
                SynthKind::Causal => {
                    let data = generate(&c.causal).stage("synth")?;
                    write_synthetic(&mut w, &data, c.causal.coupling).map_err(|e| ExperimentError::io(&out, e))?;
                    data.len()
                }
                SynthKind::Text => {
                    let data = generate_corpus(&c.text).stage("synth")?;
                    rrm_core::corpus::write_preferences(&mut w, &data).map_err(|e| ExperimentError::io(&out, e))?;
                    data.len()
                }
                SynthKind::Pools => {
                    let n_max = c.curve.ns.iter().copied().max().unwrap_or(2);
                    let pools = generate_pools(&c.text, c.curve.prompts, n_max, c.seeds.eval).stage("synth")?;
                    for p in &pools {
                        serde_json::to_writer(&mut w, p).expect("pool serializes");
                        w.write_all(b"\n").map_err(|e| ExperimentError::io(&out, e))?;
                    }
                    pools.len()
                }
            };
            finish(w, &out)?;
            print_json(&json!({ "output": out, "records": n }));
        }
        Command::Inject {
            cfg,
            input,
            preset: name,
            rate,
            side,
            out,
        } => {
            let (c, _) = load_config(&cfg, &[])?;
            let specs = match (name, rate) {
                (Some(n), Some(r)) => vec![preset(&n, r)?],
                _ => c.artifacts.clone(),
            };
            if specs.is_empty() {
                return Err(ExperimentError::Config("no artifacts configured; use --preset and --rate".into()));
            }
            let side = match side {
                SideArg::Chosen => Side::Chosen,
                SideArg::Rejected => Side::Rejected,
                SideArg::Both => Side::Both,
            };
            let mut data: Vec<PreferenceExample> = load_preferences(&input).stage("load")?;
            let mut affected = Vec::new();
            for s in &specs {
                let (d, k) = corrupt_dataset(&data, s, side, c.seeds.injection);
                data = d;
                affected.push(json!({ "artifact": s.label(), "rate": s.probability, "affected": k }));
            }
            save_preferences(&out, &data).stage("save")?;
            print_json(&json!({ "output": out, "n": data.len(), "artifacts": affected }));
        }
        Command::Bon { cfg, model, pools, n } => {
            let (c, _) = load_config(&cfg, &[])?;
            let m = load_model(&model)?;
            let sets = pool_sets(load_pools(&pools)?)?;
            let mut stdout = std::io::stdout().lock();
            for (k, s) in sets.iter().enumerate() {
                let s = match n {
                    Some(n) => s.truncated(n).stage("bon")?,
                    None => s.clone(),
                };
                let w = bon_select_with(&m, &s, c.curve.rule).stage("bon")?;
                let line = json!({ "pool": k, "selected": w, "response": s.candidates[w] });
                if writeln!(stdout, "{line}").is_err() {
                    break;
                }
            }
        }
        Command::Dpo {
            cfg,
            model,
            pools,
            out,
        } => {
            let (c, _) = load_config(&cfg, &[])?;
            let m = load_model(&model)?;
            let sets = pool_sets(load_pools(&pools)?)?;
            let sizes: Vec<usize> = sets.iter().map(|s| s.candidates.len()).collect();
            let reference = ToyPolicy::uniform(&sizes).stage("dpo")?;
            let mut pairs = Vec::new();
            for (k, s) in sets.iter().enumerate() {
                match best_worst_pair(&m, s) {
                    Ok((chosen, rejected)) => pairs.push(DpoPair {
                        prompt: k,
                        chosen,
                        rejected,
                    }),
                    Err(PolicyError::Degenerate) => {}
                    Err(e) => return Err(e).stage("dpo"),
                }
            }
            let (pol, report) = dpo_train(&reference, &pairs, &c.dpo.train, c.dpo.beta).stage("dpo")?;
            if let Some(out) = &out {
                let mut w = create(out)?;
                for k in 0..sets.len() {
                    let line = json!({ "pool": k, "probs": pol.probs(k) });
                    writeln!(w, "{line}").map_err(|e| ExperimentError::io(out, e))?;
                }
                finish(w, out)?;
            }
            print_json(&json!({
                "pairs": pairs.len(),
                "initial_loss": report.loss_trace.first(),
                "final_loss": report.loss_trace.last(),
                "steps": report.steps,
            }));
        }
        Command::Curve {
            cfg,
            model,
            pools,
            preset: name,
            out,
        } => {
            let (mut c, _) = load_config(&cfg, &[])?;
            if let Some(n) = name {
                c.curve.artifact = Some(preset(&n, 1.0)?.kind);
            }
            let spec = eval_artifact(&c)?;
            let m = load_model(&model)?;
            let sets = pool_sets(load_pools(&pools)?)?;
            let mut rows = Vec::new();
            for &n in &c.curve.ns {
                for r in ruled_curve(&m, &sets, &spec, &c.curve.rates, n, c.seeds.eval, c.curve.rule)? {
                    rows.push(json!({
                        "n": n,
                        "rate": r.rate,
                        "proportion": r.proportion,
                        "count": r.count,
                        "half_width": r.half_width,
                    }));
                }
            }
            let report = Report::from_serializable("artifact_curve", &rows).stage("report")?;
            emit(&report, c.format, out.as_deref())?;
        }
        Command::Stats { cfg, data, histogram } => {
            let (c, _) = load_config(&cfg, &[])?;
            let name = data
                .preferences
                .as_ref()
                .or(data.candidates.as_ref())
                .and_then(|p| p.file_stem())
                .map_or_else(|| "input".to_string(), |s| s.to_string_lossy().into_owned());
            let rep = match &data.preferences {
                Some(p) => length_report(&load_preferences(p).stage("load")?, None),
                None => length_report(&load_data(&data, 0)?, None),
            }
            .stage("stats")?;
            let report = if histogram {
                rep.histogram(&name)
            } else {
                rep.summary(&name)
            };
            emit(&report, c.format, None)?;
        }
        Command::Run {
            cfg,
            protocol,
            out_dir,
        } => {
            let leading: Vec<String> = protocol.iter().map(|p| format!("protocol={p:?}")).collect();
            let (mut c, applied) = load_config(&cfg, &leading)?;
            if let Some(d) = out_dir {
                c.output_dir = d;
            }
            let s = run_experiment(&c, &applied)?;
            println!("{}", s.manifest.display());
        }
    }
    Ok(())
}

fn emit(report: &Report, format: rrm_core::metrics::ReportFormat, out: Option<&Path>) -> Result<()> {
    let text = render_report(report, format);
    match out {
        Some(p) => fs::write(p, text).map_err(|e| ExperimentError::io(p, e)),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
