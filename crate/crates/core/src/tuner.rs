//! Feasibility-guided optimisation (FGO) of the class-K parameters, the
//! plain gradient-descent (GD) baseline, and their combination.
//!
//! Each iteration estimates `∂D/∂(p, q)` by forward differences of full
//! rollouts, then picks a step `ν` from a small LP. FGO adds the row
//! `∇H·ν + γH ≥ 0`, which keeps the parameters on the feasible side of the
//! learned hypersurface `H`; GD solves the same LP without it.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::SvmModel;
use crate::constraints::{ClassKParams, ConstraintTag, LinearConstraint};
use crate::controller::Scenario;
use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::solvers::{solve_lp, LpInstance};

/// Parameters never step below this value, so every iterate stays a valid
/// class-K parameterisation.
pub const PARAM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerMode {
    Fgo,
    Gd,
    /// GD to termination, then FGO from the GD optimum.
    Combined,
}

impl std::str::FromStr for TunerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgo" => Ok(Self::Fgo),
            "gd" => Ok(Self::Gd),
            "combined" => Ok(Self::Combined),
            other => Err(Error::InvalidParameter(format!("unknown tuner mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    /// Process-time step applied to `ν`.
    pub dtau: f64,
    pub nu_min: [f64; 4],
    pub nu_max: [f64; 4],
    pub max_iter: usize,
    pub fd_step: f64,
    /// Gain of the linear class-K function on `H`.
    pub gamma: f64,
    pub mode: TunerMode,
    /// Random restarts allowed when no gradient component can be evaluated.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            dtau: 0.1,
            nu_min: [-0.1; 4],
            nu_max: [0.1; 4],
            max_iter: 200,
            fd_step: 0.05,
            gamma: 1.0,
            mode: TunerMode::Fgo,
            max_retries: 10,
            seed: 0,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.dtau > 0.0 && self.dtau.is_finite()) {
            return bad("dtau must be positive");
        }
        if !(0..4)
            .all(|k| self.nu_min[k] < 0.0 && 0.0 < self.nu_max[k] && self.nu_max[k].is_finite() && self.nu_min[k].is_finite())
        {
            return bad("nu bounds must satisfy nu_min < 0 < nu_max componentwise");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if !(self.fd_step > 0.0) {
            return bad("fd_step must be positive");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub value: [f64; 4],
    /// False where the perturbed rollout was infeasible; the value is then 0.
    pub valid: [bool; 4],
}

impl Gradient {
    pub fn all_invalid(&self) -> bool {
        self.valid.iter().all(|v| !v)
    }

    pub fn is_zero(&self) -> bool {
        self.value.iter().all(|v| *v == 0.0)
    }
}

/// Robustness metric of a feasible rollout, `None` otherwise.
pub fn evaluate_d(params: &ClassKParams, scenario: &Scenario) -> Result<Option<f64>> {
    let rec = scenario.rollout(params)?;
    Ok(if rec.feasible { rec.robustness } else { None })
}

fn shifted(params: &ClassKParams, delta: [f64; 4]) -> Result<ClassKParams> {
    let v = params.to_vector();
    ClassKParams::from_vector(std::array::from_fn(|k| v[k] + delta[k]))
}

/// Forward differences of `D` with step `fd_step`. `d0` is `D(params)`.
pub fn eval_d_gradient(params: &ClassKParams, d0: f64, scenario: &Scenario, cfg: &TunerConfig) -> Result<Gradient> {
    let mut g = Gradient {
        value: [0.0; 4],
        valid: [false; 4],
    };
    for k in 0..4 {
        let mut e = [0.0; 4];
        e[k] = cfg.fd_step;
        if let Some(d) = evaluate_d(&shifted(params, e)?, scenario)? {
            g.value[k] = (d - d0) / cfg.fd_step;
            g.valid[k] = true;
        }
    }
    Ok(g)
}

/// Same as [`eval_d_gradient`] but rolls out the base point first.
pub fn d_gradient(params: &ClassKParams, scenario: &Scenario, cfg: &TunerConfig) -> Result<(f64, Gradient)> {
    let d0 = evaluate_d(params, scenario)?.ok_or(Error::InfeasibleStart)?;
    Ok((d0, eval_d_gradient(params, d0, scenario, cfg)?))
}

/// Outcome of one LP step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub params: ClassKParams,
    pub nu: [f64; 4],
}

fn lp_step(params: &ClassKParams, grad: &[f64; 4], row: Option<LinearConstraint>, cfg: &TunerConfig) -> Result<Option<Step>> {
    let x = params.to_vector();
    let bounds: Vec<(f64, f64)> = (0..4)
        .map(|k| {
            let lo = cfg.nu_min[k].max((PARAM_FLOOR - x[k]) / cfg.dtau).min(0.0);
            (lo, cfg.nu_max[k])
        })
        .collect();
    let sol = solve_lp(&LpInstance {
        cost: grad.to_vec(),
        rows: row.into_iter().collect(),
        bounds,
    })?;
    if !sol.is_optimal() {
        return Ok(None);
    }
    let nu: [f64; 4] = std::array::from_fn(|k| sol.x[k]);
    let params = shifted(params, std::array::from_fn(|k| nu[k] * cfg.dtau))?;
    Ok(Some(Step { params, nu }))
}

/// `min gradᵀν` over the ν box only.
pub fn gd_step(params: &ClassKParams, grad: &[f64; 4], cfg: &TunerConfig) -> Result<Step> {
    Ok(lp_step(params, grad, None, cfg)?.expect("a box-only LP is feasible"))
}

/// `min gradᵀν` subject to `∇H·ν + γH ≥ 0` and the ν box. `None` if the
/// row cannot be met inside the box, which only happens when `H < 0`.
pub fn fgo_step(params: &ClassKParams, grad: &[f64; 4], model: &SvmModel, cfg: &TunerConfig) -> Result<Option<Step>> {
    let x = params.to_vector();
    let row = LinearConstraint::geq(
        model.decision_gradient(&x).to_vec(),
        cfg.gamma * model.decision(&x),
        ConstraintTag::Hypersurface,
    );
    lp_step(params, grad, Some(row), cfg)
}

/// Result of [`guarded_fgo_step`].
#[derive(Debug, Clone, PartialEq)]
pub enum Guarded {
    Step(Step),
    /// The step LP had no solution.
    LpInfeasible,
    /// Every halving still crossed `H = 0`: no admissible step remains.
    Blocked,
}

/// [`fgo_step`], with the step halved (up to 30 times) while it would carry
/// a point with `H ≥ 0` to `H < 0`. The LP only sees the linearisation of
/// `H`, and the curvature of a high-degree kernel can otherwise push a full
/// step slightly across the hypersurface.
pub fn guarded_fgo_step(params: &ClassKParams, grad: &[f64; 4], model: &SvmModel, cfg: &TunerConfig) -> Result<Guarded> {
    let Some(mut step) = fgo_step(params, grad, model, cfg)? else {
        return Ok(Guarded::LpInfeasible);
    };
    if model.decision(&params.to_vector()) < 0.0 {
        return Ok(Guarded::Step(step));
    }
    for _ in 0..30 {
        if model.decision(&step.params.to_vector()) >= 0.0 {
            return Ok(Guarded::Step(step));
        }
        step.nu.iter_mut().for_each(|v| *v *= 0.5);
        step.params = shifted(params, std::array::from_fn(|k| step.nu[k] * cfg.dtau))?;
    }
    Ok(Guarded::Blocked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminationReason {
    Infeasible,
    ZeroGradient,
    NoImprovement,
    /// FGO found no step that stays on the feasible side of `H = 0`.
    Boundary,
    MaxIter,
}

/// One accepted iterate. Random restarts after an all-invalid gradient are
/// listed with `fallback = true`. The last entry of a run carries the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub iter: usize,
    pub p: [f64; 2],
    pub q: [f64; 2],
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "H")]
    pub h: Option<f64>,
    pub nu: [f64; 4],
    pub fallback: bool,
    pub reason: Option<TerminationReason>,
}

impl TraceEntry {
    pub fn params(&self) -> ClassKParams {
        ClassKParams::from_vector([self.p[0], self.p[1], self.q[0], self.q[1]]).expect("trace holds valid parameters")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerTrace {
    pub entries: Vec<TraceEntry>,
    pub best: ClassKParams,
    pub d_min: f64,
    pub reason: TerminationReason,
    /// Optimum of the GD leg in combined mode.
    pub gd_d_min: Option<f64>,
}

impl TunerTrace {
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<TraceEntry>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

fn entry(iter: usize, params: &ClassKParams, d: f64, model: Option<&SvmModel>, nu: [f64; 4], fallback: bool) -> TraceEntry {
    let v = params.to_vector();
    TraceEntry {
        iter,
        p: [v[0], v[1]],
        q: [v[2], v[3]],
        d,
        h: model.map(|m| m.decision(&v)),
        nu,
        fallback,
        reason: None,
    }
}

/// Runs the tuner from a rollout-feasible `start`. FGO and combined modes
/// need a classifier.
pub fn run_tuner(start: &ClassKParams, model: Option<&SvmModel>, scenario: &Scenario, cfg: &TunerConfig) -> Result<TunerTrace> {
    cfg.validate()?;
    match cfg.mode {
        TunerMode::Combined => {
            let gd = run_single(start, model, scenario, cfg, TunerMode::Gd, 0)?;
            let first = gd.entries.last().map_or(0, |e| e.iter + 1);
            let fgo = run_single(&gd.best, model, scenario, cfg, TunerMode::Fgo, first)?;
            let mut entries = gd.entries;
            // The FGO leg starts at the GD optimum, which is already listed.
            entries.extend(fgo.entries.into_iter().skip(1));
            Ok(TunerTrace {
                entries,
                best: fgo.best,
                d_min: fgo.d_min,
                reason: fgo.reason,
                gd_d_min: Some(gd.d_min),
            })
        }
        mode => run_single(start, model, scenario, cfg, mode, 0),
    }
}

fn run_single(
    start: &ClassKParams,
    model: Option<&SvmModel>,
    scenario: &Scenario,
    cfg: &TunerConfig,
    mode: TunerMode,
    first_iter: usize,
) -> Result<TunerTrace> {
    if mode == TunerMode::Fgo && model.is_none() {
        return Err(Error::InvalidParameter("FGO needs a classifier model".into()));
    }
    let mut cur = start.clone();
    let mut d_cur = evaluate_d(&cur, scenario)?.ok_or(Error::InfeasibleStart)?;
    let mut entries = vec![entry(first_iter, &cur, d_cur, model, [0.0; 4], false)];
    let mut best = (cur.clone(), d_cur);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut retries = 0;
    let mut reason = TerminationReason::MaxIter;
    let mut iter = first_iter;

    for _ in 0..cfg.max_iter {
        iter += 1;
        let grad = eval_d_gradient(&cur, d_cur, scenario, cfg)?;
        if grad.all_invalid() {
            if retries == cfg.max_retries {
                reason = TerminationReason::ZeroGradient;
                break;
            }
            retries += 1;
            let delta: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-cfg.fd_step..=cfg.fd_step));
            let x = cur.to_vector();
            let moved = ClassKParams::from_vector(std::array::from_fn(|k| (x[k] + delta[k]).max(PARAM_FLOOR)))?;
            if let Some(d) = evaluate_d(&moved, scenario)? {
                let nu: [f64; 4] = std::array::from_fn(|k| (moved.to_vector()[k] - x[k]) / cfg.dtau);
                cur = moved;
                d_cur = d;
                // Restarts are not hypersurface-guided; list them as fallbacks.
                entries.push(entry(iter, &cur, d_cur, model, nu, true));
                if d_cur <= best.1 {
                    best = (cur.clone(), d_cur);
                }
            }
            continue;
        }
        if grad.is_zero() {
            reason = TerminationReason::ZeroGradient;
            break;
        }

        let mut fallback = false;
        let mut step = match mode {
            TunerMode::Fgo => match guarded_fgo_step(&cur, &grad.value, model.expect("checked above"), cfg)? {
                Guarded::Step(s) => Some(s),
                Guarded::LpInfeasible => None,
                Guarded::Blocked => {
                    reason = TerminationReason::Boundary;
                    break;
                }
            },
            _ => Some(gd_step(&cur, &grad.value, cfg)?),
        };
        let mut d_new = match &step {
            Some(s) => evaluate_d(&s.params, scenario)?,
            None => None,
        };
        if d_new.is_none() && mode == TunerMode::Fgo {
            fallback = true;
            let s = gd_step(&cur, &grad.value, cfg)?;
            d_new = evaluate_d(&s.params, scenario)?;
            step = Some(s);
        }
        let (Some(step), Some(d_new)) = (step, d_new) else {
            reason = TerminationReason::Infeasible;
            break;
        };
        if d_new > d_cur {
            reason = TerminationReason::NoImprovement;
            break;
        }
        cur = step.params;
        d_cur = d_new;
        entries.push(entry(iter, &cur, d_cur, model, step.nu, fallback));
        if d_cur <= best.1 {
            best = (cur.clone(), d_cur);
        }
    }
    if let Some(last) = entries.last_mut() {
        last.reason = Some(reason);
    }
    log::debug!("{mode:?} tuner stopped ({reason:?}) at D = {:.4}", best.1);
    Ok(TunerTrace {
        entries,
        best: best.0,
        d_min: best.1,
        reason,
        gd_d_min: None,
    })
}

/// FGO versus GD from a pool of starts, in the shape of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub starts: usize,
    pub better: usize,
    pub worse: usize,
    pub ties: usize,
    pub fgo_d_min: f64,
    pub gd_d_min: f64,
    /// FGO and GD optimum per start.
    pub pairs: Vec<(f64, f64)>,
}

impl Comparison {
    pub fn better_fraction(&self) -> f64 {
        self.better as f64 / self.starts.max(1) as f64
    }

    pub fn worse_fraction(&self) -> f64 {
        self.worse as f64 / self.starts.max(1) as f64
    }

    /// The same counts over a larger denominator, e.g. the whole test pool.
    pub fn fractions_over(&self, total: usize) -> (f64, f64) {
        let t = total.max(1) as f64;
        (self.better as f64 / t, self.worse as f64 / t)
    }
}

/// Runs FGO and GD from every start (in parallel) and counts strict
/// comparisons of the final `D_min`.
pub fn compare_modes(starts: &[ClassKParams], model: &SvmModel, scenario: &Scenario, cfg: &TunerConfig) -> Result<Comparison> {
    let pairs = starts
        .par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let fgo = run_tuner(
                s,
                Some(model),
                scenario,
                &TunerConfig {
                    mode: TunerMode::Fgo,
                    ..cfg.clone()
                },
            )?;
            let gd = run_tuner(
                s,
                Some(model),
                scenario,
                &TunerConfig {
                    mode: TunerMode::Gd,
                    ..cfg.clone()
                },
            )?;
            Ok((fgo.d_min, gd.d_min))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cmp = Comparison {
        starts: pairs.len(),
        better: 0,
        worse: 0,
        ties: 0,
        fgo_d_min: f64::INFINITY,
        gd_d_min: f64::INFINITY,
        pairs: Vec::new(),
    };
    for &(f, g) in &pairs {
        match f.partial_cmp(&g) {
            Some(std::cmp::Ordering::Less) => cmp.better += 1,
            Some(std::cmp::Ordering::Greater) => cmp.worse += 1,
            _ => cmp.ties += 1,
        }
        cmp.fgo_d_min = cmp.fgo_d_min.min(f);
        cmp.gd_d_min = cmp.gd_d_min.min(g);
    }
    cmp.pairs = pairs;
    Ok(cmp)
}

/// GD alone versus GD followed by FGO, from every start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub starts: usize,
    pub improved: usize,
    /// GD optimum and combined optimum per start.
    pub pairs: Vec<(f64, f64)>,
}

impl CombinedReport {
    pub fn improved_fraction(&self) -> f64 {
        self.improved as f64 / self.starts.max(1) as f64
    }
}

pub fn combined_improvement(
    starts: &[ClassKParams],
    model: &SvmModel,
    scenario: &Scenario,
    cfg: &TunerConfig,
) -> Result<CombinedReport> {
    let cfg = TunerConfig {
        mode: TunerMode::Combined,
        ..cfg.clone()
    };
    let traces = tune_pool(starts, Some(model), scenario, &cfg)?;
    Ok(CombinedReport::from_traces(&traces))
}

impl CombinedReport {
    /// Counts from combined-mode traces.
    pub fn from_traces(traces: &[TunerTrace]) -> Self {
        let pairs: Vec<(f64, f64)> = traces
            .iter()
            .map(|t| {
                let gd = t.gd_d_min.unwrap_or(t.d_min);
                (gd, t.d_min.min(gd))
            })
            .collect();
        Self {
            starts: pairs.len(),
            improved: pairs.iter().filter(|(g, c)| c < g).count(),
            pairs,
        }
    }
}

/// Runs the tuner from every start in parallel; traces in start order.
pub fn tune_pool(
    starts: &[ClassKParams],
    model: Option<&SvmModel>,
    scenario: &Scenario,
    cfg: &TunerConfig,
) -> Result<Vec<TunerTrace>> {
    starts.par_iter().map(|s| run_tuner(s, model, scenario, cfg)).collect()
}
