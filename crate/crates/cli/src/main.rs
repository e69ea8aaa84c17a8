//! `hocbf`: the tuning pipeline as file-to-file stages.
//!
//! Exit codes: 0 success, 1 domain failure (infeasible rollout, collision)
//! or runtime error, 2 usage or configuration error, including a missing
//! predecessor artifact.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hocbf_core::bench::run_bench;
use hocbf_core::classifier::{train, SvmModel};
use hocbf_core::config::RunConfig;
use hocbf_core::constraints::ClassKParams;
use hocbf_core::dataset::{build_dataset, holdout_seed, FeasibilityDataset};
use hocbf_core::exploration::{run_batch, Outcome};
use hocbf_core::persist::write_atomic;
use hocbf_core::tuner::{tune_pool, CombinedReport, TunerMode};

const DATASET: &str = "dataset.csv";
const MODEL: &str = "model.json";
const TUNE_REPORT: &str = "tune_report.json";

#[derive(Parser, Debug)]
#[command(name = "hocbf", version, about = "Feasibility-guided tuning of HOCBF class-K parameters")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one controller rollout and write its trajectory and summary.
    Simulate(ParamsArg),
    /// Sample and label class-K parameters.
    Sample {
        /// Number of samples M.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the feasibility classifier on the sampled dataset.
    Train,
    /// Tune from every feasible sample of the dataset.
    Tune {
        /// fgo, gd or combined; defaults to the config's tuner mode.
        #[arg(long)]
        mode: Option<TunerMode>,
    },
    /// Run exploration episodes among unknown moving obstacles.
    Explore(ParamsArg),
    /// Comparison table over training-set sizes and QP step timing.
    Bench {
        /// Single training-set size, replacing the configured list.
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct ParamsArg {
    /// Class-K parameters `p1,p2,q1,q2`.
    #[arg(long, value_parser = parse_params)]
    params: Option<[f64; 4]>,
}

fn parse_params(s: &str) -> Result<[f64; 4], String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 comma-separated values, got {}", v.len()))
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcomes = Result<bool, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Path of a predecessor artifact, failing with its name when absent.
fn artifact(cfg: &RunConfig, name: &str, stage: &str) -> Result<PathBuf, Failure> {
    let p = cfg.out.join(name);
    if !p.is_file() {
        return Err(usage(anyhow!("missing {} (run `hocbf {stage}` first)", p.display())));
    }
    Ok(p)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn params_or(arg: &ParamsArg, fallback: [f64; 4]) -> Result<ClassKParams, Failure> {
    ClassKParams::from_vector(arg.params.unwrap_or(fallback)).map_err(usage)
}

fn run(cli: Cli) -> Outcomes {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Simulate(p) => simulate(&cfg, &params_or(p, cfg.params)?),
        Command::Sample { samples } => sample(&cfg, samples.unwrap_or(cfg.samples)),
        Command::Train => train_cmd(&cfg),
        Command::Tune { mode } => tune(&cfg, mode.unwrap_or(cfg.tuner.mode)),
        Command::Explore(p) => {
            let params = match &p.params {
                Some(_) => params_or(p, cfg.params)?,
                None => tuned_params(&cfg)?,
            };
            explore(&cfg, &params)
        }
        Command::Bench { samples } => {
            let mut cfg = cfg.clone();
            if let Some(m) = samples {
                cfg.bench.sample_sizes = vec![*m];
            }
            cfg.validate().map_err(usage)?;
            bench(&cfg)
        }
    }
}

fn simulate(cfg: &RunConfig, params: &ClassKParams) -> Outcomes {
    let sc = cfg.scenario()?;
    let rec = sc.rollout(params)?;
    rec.save_csv(&cfg.out.join("trajectory.csv"))?;
    let ok = rec.feasible && rec.converged;
    let summary = json!({
        "params": params.to_vector(),
        "feasible": rec.feasible,
        "converged": rec.converged,
        "termination": rec.termination,
        "t_converge": rec.t_converge,
        "steps": rec.samples.len(),
        "D": if rec.feasible { rec.robustness } else { None },
        "no_activation": rec.no_activation,
        "activations": rec.activations,
        "min_barrier": rec.min_barrier,
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!(
        "termination {:?}, feasible {}, D {}",
        rec.termination,
        rec.feasible,
        rec.robustness
            .filter(|_| rec.feasible)
            .map_or("-".into(), |d| format!("{d:.3}"))
    );
    Ok(ok)
}

fn sample(cfg: &RunConfig, m: usize) -> Outcomes {
    if m == 0 {
        return Err(usage(anyhow!("--samples must be positive")));
    }
    let ds = build_dataset(m, cfg.seed, &cfg.scenario()?)?;
    let path = cfg.out.join(DATASET);
    ds.save(&path)?;
    let labelled = ds.labelled().count();
    println!(
        "{m} samples, {labelled} labelled, feasible fraction {:.3}, best D {} -> {}",
        ds.feasible_fraction(),
        ds.best().map_or("-".into(), |b| format!("{:.3}", b.1)),
        path.display()
    );
    Ok(true)
}

fn train_cmd(cfg: &RunConfig) -> Outcomes {
    let ds = FeasibilityDataset::load(&artifact(cfg, DATASET, "sample")?)?;
    let (xs, ys) = ds.training_set();
    let model = train(&xs, &ys, &cfg.svm)?;
    model.save(&cfg.out.join(MODEL))?;
    let holdout = if cfg.holdout > 0 {
        let pool = build_dataset(cfg.holdout, holdout_seed(ds.seed), &ds.scenario)?;
        let (hx, hy) = pool.training_set();
        Some(model.evaluate(&hx, &hy))
    } else {
        None
    };
    let report = json!({
        "samples": ds.samples.len(),
        "labelled": xs.len(),
        "support_vectors": model.sv.len(),
        "kkt_gap": model.kkt_gap,
        "training_accuracy": model.training_accuracy,
        "holdout_accuracy": holdout.map(|c| c.accuracy()),
        "holdout_confusion": holdout,
    });
    write_json(&cfg.out.join("train_report.json"), &report)?;
    print!("training accuracy {:.4}", model.training_accuracy);
    if let Some(c) = holdout {
        print!(", held-out accuracy {:.4} over {}", c.accuracy(), c.total());
    }
    println!();
    Ok(true)
}

fn tune(cfg: &RunConfig, mode: TunerMode) -> Outcomes {
    let ds = FeasibilityDataset::load(&artifact(cfg, DATASET, "sample")?)?;
    let model = if mode == TunerMode::Gd && !cfg.out.join(MODEL).is_file() {
        None
    } else {
        Some(SvmModel::load(&artifact(cfg, MODEL, "train")?)?)
    };
    let starts = ds.feasible_params();
    if starts.is_empty() {
        println!("no feasible sample to start from");
        return Ok(false);
    }
    let tcfg = hocbf_core::tuner::TunerConfig {
        mode,
        ..cfg.tuner.clone()
    };
    let traces = tune_pool(&starts, model.as_ref(), &ds.scenario, &tcfg)?;
    let dir = cfg.out.join("traces");
    for (i, t) in traces.iter().enumerate() {
        t.save(&dir.join(format!("start_{i:04}.jsonl")))?;
    }
    let best = traces
        .iter()
        .min_by(|a, b| a.d_min.total_cmp(&b.d_min))
        .expect("non-empty pool");
    let runs: Vec<_> = traces
        .iter()
        .zip(&starts)
        .map(|(t, s)| {
            json!({
                "start": s.to_vector(),
                "D_start": t.entries[0].d,
                "D_min": t.d_min,
                "gd_D_min": t.gd_d_min,
                "best": t.best.to_vector(),
                "iterations": t.entries.len(),
                "reason": t.reason,
            })
        })
        .collect();
    let mut report = json!({
        "mode": mode,
        "starts": starts.len(),
        "D_min": best.d_min,
        "best_params": best.best.to_vector(),
        "runs": runs,
    });
    print!(
        "{mode:?}: {} starts, D_min {:.3} at {:?}",
        starts.len(),
        best.d_min,
        best.best.to_vector()
    );
    if mode == TunerMode::Combined {
        let c = CombinedReport::from_traces(&traces);
        report["further_improvement"] = json!(c.improved_fraction());
        report["improved"] = json!(c.improved);
        print!(
            ", further improvement over GD {:.1}% ({}/{})",
            100.0 * c.improved_fraction(),
            c.improved,
            c.starts
        );
    }
    println!();
    write_json(&cfg.out.join(TUNE_REPORT), &report)?;
    Ok(true)
}

fn tuned_params(cfg: &RunConfig) -> Result<ClassKParams, Failure> {
    let path = artifact(cfg, TUNE_REPORT, "tune")?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let p: [f64; 4] =
        serde_json::from_value(v["best_params"].clone()).with_context(|| format!("{}: best_params", path.display()))?;
    Ok(ClassKParams::from_vector(p)?)
}

fn explore(cfg: &RunConfig, params: &ClassKParams) -> Outcomes {
    let dir = cfg.out.join("episodes");
    let jobs = cfg
        .exploration
        .seeds
        .iter()
        .map(|&s| cfg.exploration_scenario(s).map(|sc| (sc, s)))
        .collect::<Result<Vec<_>, _>>()?;
    for (sc, s) in &jobs {
        sc.save(&dir.join(format!("scenario_{s:04}.json")))?;
    }
    let reports = run_batch(&jobs, params)?;
    let mut counts = std::collections::BTreeMap::new();
    for r in &reports {
        r.save(&dir.join(format!("episode_{:04}.json", r.seed)))?;
        *counts.entry(format!("{:?}", r.outcome).to_lowercase()).or_insert(0usize) += 1;
    }
    let collisions = reports.iter().filter(|r| r.outcome == Outcome::Collision).count();
    let summary = json!({
        "params": params.to_vector(),
        "episodes": reports.len(),
        "outcomes": counts,
        "collisions": collisions,
        "min_true_barrier": reports.iter().map(|r| r.min_true_barrier).fold(f64::INFINITY, f64::min),
        "per_seed": reports.iter().map(|r| json!({
            "seed": r.seed, "outcome": r.outcome, "steps": r.steps, "min_true_barrier": r.min_true_barrier,
        })).collect::<Vec<_>>(),
    });
    write_json(&cfg.out.join("explore_summary.json"), &summary)?;
    println!("{} episodes: {counts:?}", reports.len());
    Ok(collisions == 0)
}

fn bench(cfg: &RunConfig) -> Outcomes {
    let report = run_bench(cfg)?;
    write_atomic(&cfg.out.join("bench.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "M", "accuracy", "feasible", "better", "worse", "D_min"
    );
    for r in &report.rows {
        println!(
            "{:>6} {:>9} {:>9.3} {:>9.3} {:>9.3} {:>9}",
            r.m,
            r.accuracy.map_or("-".into(), |a| format!("{a:.3}")),
            r.feasible_fraction,
            r.fgo_better,
            r.fgo_worse,
            r.sample_d_min.map_or("-".into(), |d| format!("{d:.3}")),
        );
    }
    let t = &report.timing;
    println!(
        "QP step over {} steps: median {:.2e} s, p99 {:.2e} s, max {:.2e} s",
        t.steps, t.median, t.p99, t.max
    );
    Ok(true)
}
