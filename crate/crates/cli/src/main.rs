use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use apsearch::experiment::{Experiment, TrainEvalReport};
use apsearch::search::{self, HistoryRecord};
use apsearch::{toybench, Dataset, Error, LossParams, PapLoss, Substitution, UnitFunction};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

mod config;

use config::{Preset, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "apsearch", version, about = "Parameterized AP loss search on a synthetic detection task")]
struct Cli {
    /// JSON config merged on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; dataset, training and search seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Concurrent inner trainings during a search.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Dataset JSON written by `generate`; generated from the config otherwise.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Record wall-clock milliseconds per sample in the history.
    #[arg(long, global = true)]
    record_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Ppo2,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as JSON.
    Generate,
    /// Search loss parameters; writes best_params.json, history.jsonl and curve.csv.
    Search {
        #[arg(long, value_enum, default_value_t = Strategy::Ppo2)]
        strategy: Strategy,
        /// Number of inner trainings for random search (default T*S).
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train with one loss and report eval AP.
    TrainEval {
        /// LossParams JSON; identity parameters when omitted.
        params: Option<PathBuf>,
        #[arg(long, value_parser = parse_substitution, conflicts_with = "params")]
        substitution: Option<Substitution>,
        #[arg(long)]
        no_block_denominator: bool,
        /// Use the first function's parameters for all five.
        #[arg(long)]
        shared_params: bool,
        #[arg(long)]
        lambda_fixed: Option<f64>,
    },
    /// Write the five functions as CSV curves plus their control points.
    ExportFunctions { params: PathBuf },
    /// Merge two histories into one best-so-far CSV.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, num_args = 2, default_values = ["a", "b"])]
        labels: Vec<String>,
    },
    /// Train the given parameters next to the handcrafted substitutions and
    /// both blocking modes; writes ablation.csv.
    Ablate { params: Option<PathBuf> },
}

fn parse_substitution(s: &str) -> std::result::Result<Substitution, String> {
    s.parse::<Substitution>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.preset, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.search.jobs = jobs;
    }
    cfg.search.record_timing |= cli.record_timing;
    let cfg = cfg.resolve()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    write_json(&cli.out.join("config.json"), &cfg)?;

    let out = cli.out.as_path();
    let dataset = || load_dataset(&cfg, cli.dataset.as_deref());
    match cli.command {
        Command::Generate => {
            let ds = dataset()?;
            write_json(&out.join("dataset.json"), &ds)?;
            println!("{} train / {} eval scenes -> {}", ds.train.len(), ds.eval.len(), out.display());
        }
        Command::Search { strategy, budget } => cmd_search(&cfg, dataset()?, out, strategy, budget)?,
        Command::TrainEval { params, substitution, no_block_denominator, shared_params, lambda_fixed } => {
            let (name, loss) = build_loss(&cfg, params.as_deref(), substitution, shared_params, no_block_denominator, lambda_fixed)?;
            let exp = experiment(&cfg, dataset()?);
            let report = exp.run(&loss).map_err(|e| anyhow!("training with {name} failed: {e}"))?;
            let metrics = metrics_json(&name, &loss, &report);
            write_json(&out.join("metrics.json"), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::ExportFunctions { params } => cmd_export(&read_params(&params)?, out)?,
        Command::Compare { a, b, labels } => cmd_compare(&a, &b, &labels, out)?,
        Command::Ablate { params } => cmd_ablate(&cfg, dataset()?, params.as_deref(), out)?,
    }
    Ok(())
}

fn load_dataset(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing dataset {}", p.display()))
        }
        None => Ok(toybench::generate(&cfg.dataset)?),
    }
}

fn experiment(cfg: &RunConfig, dataset: Dataset) -> Experiment {
    Experiment::new(dataset, cfg.train.clone()).with_thresholds(cfg.thresholds.clone())
}

fn read_params(path: &Path) -> Result<LossParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a valid parameter file", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_loss(
    cfg: &RunConfig,
    params: Option<&Path>,
    substitution: Option<Substitution>,
    shared: bool,
    no_block: bool,
    lambda_fixed: Option<f64>,
) -> Result<(String, PapLoss)> {
    if let Some(l) = lambda_fixed {
        if !(l > 0.0 && l.is_finite()) {
            bail!("--lambda-fixed must be positive, got {l}");
        }
    }
    let (name, loss) = match substitution {
        Some(kind) => {
            if shared {
                bail!("--shared-params needs a parameter file");
            }
            (kind.name().to_string(), PapLoss::handcrafted(kind, cfg.search.measurement, 1.0, !no_block))
        }
        None => {
            let (name, mut p) = match params {
                Some(path) => (path.display().to_string(), read_params(path)?),
                None => {
                    let mut p = LossParams::identity(cfg.search.segments, cfg.search.measurement)?;
                    p.block_denominator = cfg.search.block_denominator;
                    ("identity".to_string(), p)
                }
            };
            if shared {
                p = p.shared();
            }
            if no_block {
                p.block_denominator = false;
            }
            (name, PapLoss::new(&p)?)
        }
    };
    Ok((name, lambda_fixed.map_or_else(|| loss.clone(), |l| loss.with_lambda(l))))
}

fn metrics_json(name: &str, loss: &PapLoss, report: &TrainEvalReport) -> serde_json::Value {
    json!({
        "loss": name,
        "lambda": loss.lambda(),
        "block_denominator": loss.block_denominator(),
        "reward": report.reward,
        "per_threshold": report.per_threshold,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "skipped_steps": report.skipped_steps,
    })
}

fn cmd_search(cfg: &RunConfig, dataset: Dataset, out: &Path, strategy: Strategy, budget: Option<usize>) -> Result<()> {
    let exp = experiment(cfg, dataset);
    let outcome = match strategy {
        Strategy::Ppo2 => {
            if budget.is_some() {
                bail!("--budget applies to --strategy random; PPO2 uses T*S trainings");
            }
            search::run_search(&cfg.search, &exp)?
        }
        Strategy::Random => {
            let n = budget.unwrap_or(cfg.search.rounds * cfg.search.samples);
            search::random_search(&cfg.search, n, &exp)?
        }
    };

    let mut history = Vec::new();
    for r in &outcome.history {
        serde_json::to_writer(&mut history, r)?;
        history.push(b'\n');
    }
    fs::write(out.join("history.jsonl"), history)?;
    write_curve(&out.join("curve.csv"), &search::best_so_far(&outcome.history))?;

    let sampled = outcome.samples().count();
    let Some((best, reward)) = outcome.best else {
        if sampled == 0 {
            println!("empty budget, nothing searched");
            return Ok(());
        }
        bail!("search produced no trainable loss");
    };
    write_json(&out.join("best_params.json"), &best)?;
    println!("best reward {reward:.6} over {sampled} trainings -> {}", out.display());
    Ok(())
}

fn write_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "round,best_so_far")?;
    for (round, best) in curve {
        writeln!(f, "{round},{best}")?;
    }
    Ok(())
}

fn cmd_export(params: &LossParams, out: &Path) -> Result<()> {
    let fns = params.functions()?;
    let mut points = serde_json::Map::new();
    for (k, f) in fns.iter().enumerate() {
        let name = format!("f{}", k + 1);
        let mut csv = fs::File::create(out.join(format!("{name}.csv")))?;
        writeln!(csv, "x,y")?;
        for i in 0..=200 {
            let x = i as f64 / 200.0;
            writeln!(csv, "{x},{}", f.value_at(x))?;
        }
        points.insert(name, serde_json::to_value(f)?);
    }
    write_json(
        &out.join("functions.json"),
        &json!({
            "M": params.segments,
            "theta_lambda": params.theta_lambda,
            "lambda": params.lambda(),
            "functions": points,
        }),
    )?;
    println!("exported 5 functions, lambda {} -> {}", params.lambda(), out.display());
    Ok(())
}

fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn cmd_compare(a: &Path, b: &Path, labels: &[String], out: &Path) -> Result<()> {
    let ca = search::best_so_far(&read_history(a)?);
    let cb = search::best_so_far(&read_history(b)?);
    let last = ca.iter().chain(&cb).map(|(r, _)| *r).max().unwrap_or(0);
    let at = |c: &[(usize, f64)], round: usize| {
        c.iter().take_while(|(r, _)| *r <= round).last().map_or(String::new(), |(_, v)| v.to_string())
    };
    let mut f = fs::File::create(out.join("compare.csv"))?;
    writeln!(f, "round,{},{}", labels[0], labels[1])?;
    for round in 1..=last {
        writeln!(f, "{round},{},{}", at(&ca, round), at(&cb, round))?;
    }
    println!("{} rounds -> {}", last, out.join("compare.csv").display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, dataset: Dataset, params: Option<&Path>, out: &Path) -> Result<()> {
    let exp = experiment(cfg, dataset);
    let (name, base) = build_loss(cfg, params, None, false, false, None)?;
    let m = cfg.search.measurement;
    let mut variants = vec![
        (name.clone(), base.with_blocking(true)),
        (format!("{name} (unblocked)"), base.with_blocking(false)),
    ];
    for kind in Substitution::ALL {
        variants.push((kind.name().to_string(), PapLoss::handcrafted(kind, m, 1.0, true)));
    }

    let mut f = fs::File::create(out.join("ablation.csv"))?;
    writeln!(f, "variant,block_denominator,reward,final_loss,status")?;
    for (label, loss) in variants {
        let (reward, final_loss, status) = match exp.run(&loss) {
            Ok(r) => (r.reward.to_string(), r.final_loss.to_string(), "ok".to_string()),
            Err(Error::TrainingDiverged { step, .. }) => (String::new(), String::new(), format!("diverged at step {step}")),
            Err(e) => return Err(e.into()),
        };
        println!("{label:<32} {reward:<22} {status}");
        writeln!(f, "\"{label}\",{},{reward},{final_loss},{status}", loss.block_denominator())?;
    }
    Ok(())
}
