//! Benchmark harness: the FGO/GD comparison table over several training-set
//! sizes and the wall time of one controller step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{train, Confusion, SvmModel};
use crate::config::RunConfig;
use crate::constraints::{ClassKParams, U1, U2};
use crate::controller::{Scenario, StepProblem};
use crate::dataset::{build_dataset, holdout_seed, sample_params, FeasibilityDataset};
use crate::dynamics::{step_with, unicycle, ControlInput};
use crate::error::Result;
use crate::solvers::{solve_qp, QpStatus};
use crate::tuner::{compare_modes, Comparison};

/// Upper bin edges of the timing histogram, seconds; the last bin is open.
pub const HISTOGRAM_EDGES: [f64; 10] = [1e-6, 2e-6, 5e-6, 1e-5, 2e-5, 5e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub steps: usize,
    pub median: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
    pub mean: f64,
    /// Counts per bin of `HISTOGRAM_EDGES`, plus one overflow bin.
    pub histogram: Vec<usize>,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |f: f64| -> f64 {
            if s.is_empty() {
                return f64::NAN;
            }
            s[((s.len() - 1) as f64 * f).round() as usize]
        };
        let median = if s.is_empty() {
            f64::NAN
        } else if s.len() % 2 == 1 {
            s[s.len() / 2]
        } else {
            0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
        };
        let mut histogram = vec![0; HISTOGRAM_EDGES.len() + 1];
        for &t in &s {
            histogram[HISTOGRAM_EDGES.iter().position(|&e| t <= e).unwrap_or(HISTOGRAM_EDGES.len())] += 1;
        }
        Self {
            steps: s.len(),
            median,
            p90: q(0.9),
            p99: q(0.99),
            max: s.last().copied().unwrap_or(f64::NAN),
            mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
            histogram,
        }
    }
}

/// Wall time of assembling and solving each step QP of one rollout. The
/// loop mirrors the controller rollout; only assembly and solve are timed.
pub fn qp_step_times(scenario: &Scenario, params: &ClassKParams) -> Result<Vec<f64>> {
    let cfg = &scenario.controller;
    let problem = StepProblem::new(&scenario.obstacles, cfg, params)?;
    let model = unicycle();
    let max_steps = (cfg.t_final / cfg.dt + 1e-9).floor() as usize;
    let mut state = scenario.start;
    let mut times = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        if (state.x - cfg.goal.0).hypot(state.y - cfg.goal.1) <= cfg.goal_radius {
            break;
        }
        let t0 = Instant::now();
        let qp = problem.assemble(&state)?;
        let sol = solve_qp(&qp)?;
        times.push(t0.elapsed().as_secs_f64());
        if sol.status == QpStatus::Infeasible {
            break;
        }
        let u = ControlInput::new(sol.primal[U1], sol.primal[U2]);
        state = step_with(&model, cfg.integrator, state, u, cfg.dt)?;
    }
    Ok(times)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub m: usize,
    pub labelled: usize,
    pub feasible_fraction: f64,
    /// Held-out classification accuracy; `None` without a held-out pool.
    pub accuracy: Option<f64>,
    pub confusion: Option<Confusion>,
    /// Smallest `D` among the sampled feasible parameters.
    pub sample_d_min: Option<f64>,
    /// FGO better/worse than GD, over the feasible starts.
    pub fgo_better: f64,
    pub fgo_worse: f64,
    /// The same counts over all labelled samples.
    pub fgo_better_pool: f64,
    pub fgo_worse_pool: f64,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub rows: Vec<TableRow>,
    pub timing: TimingStats,
    /// Rollouts spent on datasets, the held-out pool and timing.
    pub rollouts: usize,
    pub timing_rollouts: usize,
}

/// Trains on `ds`, scores on `holdout` and compares FGO with GD from the
/// feasible samples of `ds`.
pub fn table_row(ds: &FeasibilityDataset, holdout: Option<&FeasibilityDataset>, cfg: &RunConfig) -> Result<(TableRow, SvmModel)> {
    let (xs, ys) = ds.training_set();
    let model = train(&xs, &ys, &cfg.svm)?;
    let confusion = holdout.map(|h| {
        let (hx, hy) = h.training_set();
        model.evaluate(&hx, &hy)
    });
    let starts = ds.feasible_params();
    let comparison = compare_modes(&starts, &model, &ds.scenario, &cfg.tuner)?;
    let labelled = xs.len();
    let (better_pool, worse_pool) = comparison.fractions_over(labelled);
    let row = TableRow {
        m: ds.samples.len(),
        labelled,
        feasible_fraction: ds.feasible_fraction(),
        accuracy: confusion.map(|c| c.accuracy()),
        confusion,
        sample_d_min: ds.best().map(|b| b.1),
        fgo_better: comparison.better_fraction(),
        fgo_worse: comparison.worse_fraction(),
        fgo_better_pool: better_pool,
        fgo_worse_pool: worse_pool,
        comparison,
    };
    Ok((row, model))
}

/// Builds one dataset of the largest requested size and uses its prefixes
/// for the smaller ones, so every row shares the same draws.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let sc = cfg.scenario()?;
    let max_m = cfg.bench.sample_sizes.iter().copied().max().unwrap_or(0);
    let full = build_dataset(max_m, cfg.seed, &sc)?;
    let holdout = if cfg.holdout > 0 {
        Some(build_dataset(cfg.holdout, holdout_seed(cfg.seed), &sc)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &m in &cfg.bench.sample_sizes {
        let (row, _) = table_row(&full.prefix(m), holdout.as_ref(), cfg)?;
        log::info!(
            "M = {m}: accuracy {:?}, FGO better {:.3} worse {:.3}",
            row.accuracy,
            row.fgo_better,
            row.fgo_worse
        );
        rows.push(row);
    }
    let mut times = Vec::new();
    for p in sample_params(cfg.bench.timing_rollouts, cfg.seed) {
        times.extend(qp_step_times(&sc, &p)?);
    }
    Ok(BenchReport {
        seed: cfg.seed,
        rows,
        timing: TimingStats::from_samples(&times),
        rollouts: max_m + cfg.holdout + cfg.bench.timing_rollouts,
        timing_rollouts: cfg.bench.timing_rollouts,
    })
}
