//! Closed-loop HOCBF/CLF QP controller.
//!
//! At each step of length `dt` the controller freezes the state, assembles a
//! QP over `(u1, u2, δ1, δ2)`, holds the optimal control over the interval and
//! integrates. A rollout records when each obstacle's HOCBF row first becomes
//! tight; the barrier value at that moment is the robustness metric `D`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::{
    circular_obstacle_hocbf, goal_clfs, initial_condition_check, speed_limit_cbfs, ClassKParams, ClfSpec, HocbfSpec,
    LinearConstraint, DECISION_DIM, DELTA1, DELTA2, U1, U2,
};
use crate::dynamics::{step_with, unicycle, ControlInput, Integrator, SystemState};
use crate::error::{Error, Result};
use crate::solvers::{solve_qp, QpInstance, QpStatus};

/// Default parameters of the robot case study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Penalty on each CLF relaxation.
    pub relax_penalty: f64,
    /// Turning/acceleration energy trade-off in `[0, 1]`.
    pub eta: f64,
    pub u1_bounds: (f64, f64),
    pub u2_bounds: (f64, f64),
    pub v_bounds: (f64, f64),
    pub goal: (f64, f64),
    pub v0: f64,
    pub clf_rate: f64,
    /// Convergence radius around the goal.
    pub goal_radius: f64,
    /// Relative slack below which a HOCBF row counts as active.
    pub activation_tol: f64,
    /// Box on the CLF relaxations.
    pub relax_bound: f64,
    pub integrator: Integrator,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            t_final: 60.0,
            relax_penalty: 1.0,
            eta: 0.5,
            u1_bounds: (-0.2, 0.2),
            u2_bounds: (-0.5, 0.5),
            v_bounds: (0.0, 2.0),
            goal: (45.0, 25.1),
            v0: 2.0,
            clf_rate: 10.0,
            goal_radius: 0.5,
            activation_tol: 1e-6,
            relax_bound: 1e6,
            integrator: Integrator::Rk4,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.dt > 0.0 && self.t_final > 0.0 && self.goal_radius > 0.0) {
            return bad("dt, t_final and goal_radius must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        for (name, (lo, hi)) in [("u1", self.u1_bounds), ("u2", self.u2_bounds)] {
            if !(lo < 0.0 && hi > 0.0) {
                return bad(format!("{name} bounds must straddle zero, got [{lo}, {hi}]"));
            }
        }
        if !(self.v_bounds.0 < self.v_bounds.1) {
            return bad("v_bounds must satisfy v_min < v_max".into());
        }
        if !(self.v0 >= self.v_bounds.0 && self.v0 <= self.v_bounds.1) {
            return bad(format!("v0 = {} lies outside the speed bounds", self.v0));
        }
        if !(self.relax_penalty > 0.0 && self.activation_tol >= 0.0 && self.relax_bound > 0.0) {
            return bad("relax_penalty and relax_bound must be positive, activation_tol >= 0".into());
        }
        Ok(())
    }

    /// Diagonal objective weights on `(u1, u2, δ1, δ2)`.
    pub fn cost_weights(&self) -> [f64; DECISION_DIM] {
        let sq_max = |(lo, hi): (f64, f64)| (lo * lo).max(hi * hi);
        let turn = self.eta * sq_max(self.u2_bounds) / sq_max(self.u1_bounds);
        [turn, 1.0 - self.eta, self.relax_penalty, self.relax_penalty]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: (f64, f64),
    pub radius: f64,
}

/// A map: robot start, obstacles and controller settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub start: SystemState,
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub controller: ControllerConfig,
}

impl Scenario {
    /// Single obstacle of safe radius 7 m between the start and a goal offset
    /// 0.1 m to the left of the line through the obstacle center.
    pub fn training() -> Self {
        Self {
            start: SystemState::new(5.0, 25.0, 0.0, 2.0),
            obstacles: vec![Obstacle {
                center: (32.0, 25.0),
                radius: 7.0,
            }],
            controller: ControllerConfig::default(),
        }
    }

    /// Stable textual fingerprint of the map, used to tie datasets to scenarios.
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("scenario serialises")
    }

    pub fn rollout(&self, params: &ClassKParams) -> Result<TrajectoryRecord> {
        run_rollout(self.start, &self.obstacles, &self.controller, params)
    }
}

/// Per-step QP pieces that stay fixed along a rollout.
#[derive(Debug, Clone)]
pub struct StepProblem {
    pub obstacles: Vec<HocbfSpec>,
    pub speed: [HocbfSpec; 2],
    pub clfs: [ClfSpec; 2],
    weights: [f64; DECISION_DIM],
    bounds: Vec<(f64, f64)>,
}

impl StepProblem {
    pub fn new(obstacles: &[Obstacle], cfg: &ControllerConfig, params: &ClassKParams) -> Result<Self> {
        cfg.validate()?;
        let obstacles = obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| circular_obstacle_hocbf(i, o.center, o.radius, params.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_specs(obstacles, cfg)
    }

    pub fn from_specs(obstacles: Vec<HocbfSpec>, cfg: &ControllerConfig) -> Result<Self> {
        let n = obstacles.len();
        let speed = speed_limit_cbfs(n, cfg.v_bounds.0, cfg.v_bounds.1)?;
        let clfs = goal_clfs(cfg.goal, cfg.v0, cfg.clf_rate, cfg.relax_penalty)?;
        let mut bounds = vec![(0.0, 0.0); DECISION_DIM];
        bounds[U1] = cfg.u1_bounds;
        bounds[U2] = cfg.u2_bounds;
        bounds[DELTA1] = (-cfg.relax_bound, cfg.relax_bound);
        bounds[DELTA2] = (-cfg.relax_bound, cfg.relax_bound);
        // A zero weight (η at either end) would leave the QP only semidefinite.
        let weights = cfg.cost_weights().map(|w| w.max(1e-9));
        Ok(Self {
            obstacles,
            speed,
            clfs,
            weights,
            bounds,
        })
    }

    pub fn all_hocbfs(&self) -> impl Iterator<Item = &HocbfSpec> {
        self.obstacles.iter().chain(self.speed.iter())
    }

    /// Rows: obstacle HOCBFs, then both speed CBFs, then both CLFs.
    pub fn assemble(&self, state: &SystemState) -> Result<QpInstance> {
        let mut rows: Vec<LinearConstraint> = Vec::with_capacity(self.obstacles.len() + 4);
        for spec in self.all_hocbfs() {
            rows.push(spec.constraint(state)?);
        }
        rows.extend(self.clfs.iter().map(|c| c.constraint(state)));
        let hessian = (0..DECISION_DIM)
            .map(|i| {
                let mut row = vec![0.0; DECISION_DIM];
                row[i] = 2.0 * self.weights[i];
                row
            })
            .collect();
        Ok(QpInstance {
            hessian,
            linear: vec![0.0; DECISION_DIM],
            rows,
            bounds: self.bounds.clone(),
        })
    }
}

/// Builds the QP for one step of the controller.
pub fn assemble_step_qp(state: &SystemState, obstacles: &[HocbfSpec], cfg: &ControllerConfig) -> Result<QpInstance> {
    cfg.validate()?;
    StepProblem::from_specs(obstacles.to_vec(), cfg)?.assemble(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub t: f64,
    pub state: SystemState,
    /// `None` on the step whose QP was infeasible.
    pub control: Option<ControlInput>,
    pub delta: [f64; 2],
    /// Row slacks at the optimum, in QP row order.
    pub slacks: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationEvent {
    pub obstacle: usize,
    pub t: f64,
    pub barrier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Converged,
    Infeasible,
    Timeout,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub samples: Vec<StepSample>,
    pub final_state: SystemState,
    pub termination: Termination,
    pub feasible: bool,
    pub converged: bool,
    pub t_converge: Option<f64>,
    /// First activation per obstacle, in order of occurrence.
    pub activations: Vec<ActivationEvent>,
    /// Per-obstacle robustness: activation barrier value, or the minimum barrier if never active.
    pub obstacle_d: Vec<f64>,
    /// `min_j D_j`; `None` for discarded rollouts or maps without obstacles.
    pub robustness: Option<f64>,
    /// Set when no obstacle row was ever active (`D` then falls back to the minimum barrier).
    pub no_activation: bool,
    pub min_barrier: f64,
}

impl TrajectoryRecord {
    pub fn discarded(&self) -> bool {
        self.termination == Termination::Discarded
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        out.write_record(["t", "x", "y", "theta", "v", "u1", "u2", "delta1", "delta2", "feasible"])?;
        for s in &self.samples {
            let num = |v: f64| v.to_string();
            let (u1, u2, d1, d2, ok) = match s.control {
                Some(u) => (num(u.u1), num(u.u2), num(s.delta[0]), num(s.delta[1]), "1"),
                None => (String::new(), String::new(), String::new(), String::new(), "0"),
            };
            out.write_record([
                num(s.t),
                num(s.state.x),
                num(s.state.y),
                num(s.state.theta),
                num(s.state.v),
                u1,
                u2,
                d1,
                d2,
                ok.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::persist::write_atomic(path, &buf)
    }
}

/// Barrier value of `D` for a feasible record.
pub fn robustness_metric(rec: &TrajectoryRecord) -> Result<f64> {
    if !rec.feasible {
        return Err(Error::InfeasibleRecord);
    }
    rec.robustness.ok_or(Error::InfeasibleRecord)
}

fn goal_distance(s: &SystemState, goal: (f64, f64)) -> f64 {
    (s.x - goal.0).hypot(s.y - goal.1)
}

/// Runs the QP controller from `initial` until convergence, the first
/// infeasible QP, or `t_final`.
pub fn run_rollout(
    initial: SystemState,
    obstacles: &[Obstacle],
    cfg: &ControllerConfig,
    params: &ClassKParams,
) -> Result<TrajectoryRecord> {
    let problem = StepProblem::new(obstacles, cfg, params)?;
    run_problem(initial, &problem, cfg)
}

pub fn run_problem(initial: SystemState, problem: &StepProblem, cfg: &ControllerConfig) -> Result<TrajectoryRecord> {
    if !initial.is_finite() {
        return Err(Error::non_finite("initial state", initial));
    }
    let n_obs = problem.obstacles.len();
    let barrier_of = |s: &SystemState| -> Vec<f64> { problem.obstacles.iter().map(|o| o.barrier_value(s)).collect() };
    let mut min_b = barrier_of(&initial);
    let mut rec = TrajectoryRecord {
        samples: Vec::new(),
        final_state: initial,
        termination: Termination::Discarded,
        feasible: false,
        converged: false,
        t_converge: None,
        activations: Vec::new(),
        obstacle_d: Vec::new(),
        robustness: None,
        no_activation: false,
        min_barrier: min_b.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let all: Vec<HocbfSpec> = problem.all_hocbfs().cloned().collect();
    if !initial_condition_check(&all, &initial) {
        return Ok(rec);
    }

    let model = unicycle();
    let mut activation: Vec<Option<ActivationEvent>> = vec![None; n_obs];
    let mut state = initial;
    let max_steps = (cfg.t_final / cfg.dt + 1e-9).floor() as usize;
    let mut k = 0usize;
    let termination = loop {
        let t = k as f64 * cfg.dt;
        if goal_distance(&state, cfg.goal) <= cfg.goal_radius {
            rec.t_converge = Some(t);
            break Termination::Converged;
        }
        if k >= max_steps {
            break Termination::Timeout;
        }
        let qp = problem.assemble(&state)?;
        let sol = solve_qp(&qp)?;
        if sol.status == QpStatus::Infeasible {
            rec.samples.push(StepSample {
                t,
                state,
                control: None,
                delta: [f64::NAN; 2],
                slacks: Vec::new(),
            });
            break Termination::Infeasible;
        }
        let z = &sol.primal;
        let slacks: Vec<f64> = qp.rows.iter().map(|r| r.slack(z)).collect();
        for (j, slot) in activation.iter_mut().enumerate() {
            let row = &qp.rows[j];
            if slot.is_none() && slacks[j] <= cfg.activation_tol * (1.0 + row.constant.abs()) {
                let ev = ActivationEvent {
                    obstacle: j,
                    t,
                    barrier: problem.obstacles[j].barrier_value(&state),
                };
                *slot = Some(ev);
                rec.activations.push(ev);
            }
        }
        let u = ControlInput::new(z[U1], z[U2]);
        rec.samples.push(StepSample {
            t,
            state,
            control: Some(u),
            delta: [z[DELTA1], z[DELTA2]],
            slacks,
        });
        state = step_with(&model, cfg.integrator, state, u, cfg.dt)?;
        for (m, b) in min_b.iter_mut().zip(barrier_of(&state)) {
            *m = m.min(b);
        }
        k += 1;
    };

    rec.final_state = state;
    rec.termination = termination;
    rec.converged = termination == Termination::Converged;
    rec.feasible = rec.converged;
    rec.min_barrier = min_b.iter().copied().fold(f64::INFINITY, f64::min);
    rec.obstacle_d = activation
        .iter()
        .zip(&min_b)
        .map(|(a, m)| a.map_or(*m, |e| e.barrier))
        .collect();
    rec.no_activation = n_obs > 0 && activation.iter().all(Option::is_none);
    rec.robustness = rec.obstacle_d.iter().copied().reduce(f64::min);
    Ok(rec)
}
