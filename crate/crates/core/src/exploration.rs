//! Navigation among unknown, randomly moving circular obstacles seen through
//! a limited field-of-view sensor with noisy position estimates.
//!
//! Obstacles wander until first detected, then freeze. The controller only
//! knows detected obstacles, planned at their noisy centers with the radius
//! inflated by the noise bound, so the planned barrier never exceeds the true
//! one.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{circular_obstacle_hocbf, initial_condition_check, ClassKParams, HocbfSpec, U1, U2};
use crate::controller::{ControllerConfig, StepProblem};
use crate::dynamics::{step_with, unicycle, wrap_angle, ControlInput, SystemState};
use crate::error::{Error, Result};
use crate::persist::{read_to_string, write_atomic};
use crate::solvers::{solve_qp, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    /// Total angular width, radians.
    pub fov: f64,
    pub range: f64,
    /// Bound on the position error of a detected center.
    pub noise: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            fov: 2.0 * PI / 3.0,
            range: 7.0,
            noise: 1.0,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov <= 2.0 * PI && self.range > 0.0 && self.noise >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid sensor {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingObstacle {
    pub center: (f64, f64),
    pub radius: f64,
    pub motion_seed: u64,
}

fn default_motion_step() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

fn default_t_final() -> f64 {
    120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationScenario {
    pub start: SystemState,
    pub goal: (f64, f64),
    pub obstacles: Vec<MovingObstacle>,
    #[serde(default)]
    pub sensor: SensorSpec,
    /// Largest displacement of an unfrozen obstacle per control step, m.
    #[serde(default = "default_motion_step")]
    pub motion_step: f64,
    /// Plan against `radius + noise` instead of `radius`.
    #[serde(default = "default_true")]
    pub inflate: bool,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    /// Controller settings; `goal` and `t_final` above take precedence.
    #[serde(default)]
    pub controller: ControllerConfig,
}

impl ExplorationScenario {
    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            goal: self.goal,
            t_final: self.t_final,
            ..self.controller.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ObstacleState {
    pub center: (f64, f64),
    pub radius: f64,
    pub frozen: bool,
    pub detected: Option<(f64, f64)>,
    rng: ChaCha8Rng,
}

impl ObstacleState {
    /// True barrier `‖robot − center‖ − radius`.
    pub fn barrier(&self, s: &SystemState) -> f64 {
        (s.x - self.center.0).hypot(s.y - self.center.1) - self.radius
    }
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub obstacles: Vec<ObstacleState>,
    pub robot: SystemState,
    pub goal: (f64, f64),
    pub time: f64,
    noise_rng: ChaCha8Rng,
}

impl WorldState {
    pub fn new(scenario: &ExplorationScenario, seed: u64) -> Self {
        let obstacles = scenario
            .obstacles
            .iter()
            .map(|o| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(o.motion_seed);
                ObstacleState {
                    center: o.center,
                    radius: o.radius,
                    frozen: false,
                    detected: None,
                    rng,
                }
            })
            .collect();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(u64::MAX);
        Self {
            obstacles,
            robot: scenario.start,
            goal: scenario.goal,
            time: 0.0,
            noise_rng,
        }
    }

    /// Moves every unfrozen obstacle by a uniform draw from the disk of
    /// radius `step`.
    pub fn move_obstacles(&mut self, step: f64) {
        for o in self.obstacles.iter_mut().filter(|o| !o.frozen) {
            let (dx, dy) = disk_sample(&mut o.rng, step);
            o.center.0 += dx;
            o.center.1 += dy;
        }
    }
}

fn disk_sample(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(-PI..PI);
    (r * a.cos(), r * a.sin())
}

/// Whether the sensor sees an obstacle: its nearest boundary point lies
/// within range and its center bearing within half the field of view.
pub fn in_view(robot: &SystemState, center: (f64, f64), radius: f64, spec: &SensorSpec) -> bool {
    let (dx, dy) = (center.0 - robot.x, center.1 - robot.y);
    let boundary = dx.hypot(dy) - radius;
    let bearing = wrap_angle(dy.atan2(dx) - robot.theta);
    boundary <= spec.range && bearing.abs() <= 0.5 * spec.fov
}

/// Detects visible obstacles; a first detection freezes the obstacle and
/// fixes its noisy center estimate. Returns the newly detected indices.
pub fn sense(world: &mut WorldState, spec: &SensorSpec) -> Vec<usize> {
    let mut fresh = Vec::new();
    for (i, o) in world.obstacles.iter_mut().enumerate() {
        if o.detected.is_some() || !in_view(&world.robot, o.center, o.radius, spec) {
            continue;
        }
        let (nx, ny) = disk_sample(&mut world.noise_rng, spec.noise);
        o.detected = Some((o.center.0 + nx, o.center.1 + ny));
        o.frozen = true;
        fresh.push(i);
    }
    fresh
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Reached,
    Collision,
    Infeasible,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    pub time: f64,
    pub min_true_barrier: f64,
    /// Smallest barrier of the planning model over detected obstacles.
    pub min_planned_barrier: f64,
    pub detected: usize,
    /// Detection order as (time, obstacle index).
    pub detections: Vec<(f64, usize)>,
    /// Set when a newly detected obstacle already failed the HOCBF
    /// initial-condition check.
    pub late_detection: Option<usize>,
    pub trajectory: Vec<SystemState>,
    pub final_obstacles: Vec<ObstacleSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSnapshot {
    pub center: (f64, f64),
    pub radius: f64,
    pub estimate: Option<(f64, f64)>,
}

impl EpisodeReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Runs one episode with `params` in every obstacle HOCBF.
pub fn run_episode(scenario: &ExplorationScenario, params: &ClassKParams, seed: u64) -> Result<EpisodeReport> {
    scenario.sensor.validate()?;
    let cfg = scenario.controller_config();
    cfg.validate()?;
    let inflation = if scenario.inflate { scenario.sensor.noise } else { 0.0 };
    let model = unicycle();
    let mut world = WorldState::new(scenario, seed);
    let mut specs: Vec<HocbfSpec> = Vec::new();
    let mut report = EpisodeReport {
        seed,
        outcome: Outcome::Timeout,
        steps: 0,
        time: 0.0,
        min_true_barrier: f64::INFINITY,
        min_planned_barrier: f64::INFINITY,
        detected: 0,
        detections: Vec::new(),
        late_detection: None,
        trajectory: vec![world.robot],
        final_obstacles: Vec::new(),
    };
    let max_steps = (cfg.t_final / cfg.dt + 1e-9).floor() as usize;
    let true_min = |w: &WorldState| w.obstacles.iter().map(|o| o.barrier(&w.robot)).fold(f64::INFINITY, f64::min);
    report.min_true_barrier = true_min(&world);
    let bare = StepProblem::from_specs(Vec::new(), &cfg)?;
    if !initial_condition_check(&bare.speed, &world.robot) {
        return Err(Error::InfeasibleStart);
    }

    let outcome = loop {
        world.time = report.steps as f64 * cfg.dt;
        if report.min_true_barrier < 0.0 {
            break Outcome::Collision;
        }
        if (world.robot.x - cfg.goal.0).hypot(world.robot.y - cfg.goal.1) <= cfg.goal_radius {
            break Outcome::Reached;
        }
        if report.steps >= max_steps {
            break Outcome::Timeout;
        }
        world.move_obstacles(scenario.motion_step);
        report.min_true_barrier = report.min_true_barrier.min(true_min(&world));
        if report.min_true_barrier < 0.0 {
            break Outcome::Collision;
        }
        let fresh = sense(&mut world, &scenario.sensor);
        let mut late = None;
        for i in fresh {
            let o = &world.obstacles[i];
            let spec = circular_obstacle_hocbf(i, o.detected.expect("just detected"), o.radius + inflation, params.clone())?;
            report.detections.push((world.time, i));
            if late.is_none() && !initial_condition_check(std::slice::from_ref(&spec), &world.robot) {
                late = Some(i);
            }
            specs.push(spec);
        }
        report.detected = specs.len();
        if let Some(i) = late {
            log::debug!("seed {seed}: obstacle {i} detected too late at t = {:.1}", world.time);
            report.late_detection = Some(i);
            break Outcome::Infeasible;
        }
        for s in &specs {
            report.min_planned_barrier = report.min_planned_barrier.min(s.barrier_value(&world.robot));
        }

        let problem = StepProblem::from_specs(specs.clone(), &cfg)?;
        let sol = solve_qp(&problem.assemble(&world.robot)?)?;
        if sol.status == QpStatus::Infeasible {
            break Outcome::Infeasible;
        }
        let u = ControlInput::new(sol.primal[U1], sol.primal[U2]);
        world.robot = step_with(&model, cfg.integrator, world.robot, u, cfg.dt)?;
        report.trajectory.push(world.robot);
        report.steps += 1;
        report.min_true_barrier = report.min_true_barrier.min(true_min(&world));
    };
    report.outcome = outcome;
    report.final_obstacles = world
        .obstacles
        .iter()
        .map(|o| ObstacleSnapshot {
            center: o.center,
            radius: o.radius,
            estimate: o.detected,
        })
        .collect();
    report.time = report.steps as f64 * cfg.dt;
    Ok(report)
}

/// Runs one episode per seed, in parallel, reports in seed order.
pub fn run_exploration(scenario: &ExplorationScenario, params: &ClassKParams, seeds: &[u64]) -> Result<Vec<EpisodeReport>> {
    seeds.par_iter().map(|&s| run_episode(scenario, params, s)).collect()
}

/// Runs `(scenario, seed)` episodes in parallel, reports in input order.
pub fn run_batch(jobs: &[(ExplorationScenario, u64)], params: &ClassKParams) -> Result<Vec<EpisodeReport>> {
    jobs.par_iter().map(|(sc, s)| run_episode(sc, params, *s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub count: usize,
    pub radius_range: (f64, f64),
    /// Region the obstacle centers are drawn from.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Smallest free gap between two obstacle boundaries, m.
    pub min_gap: f64,
    /// Smallest distance from the start or the goal to any boundary, m.
    pub endpoint_clearance: f64,
    pub start: SystemState,
    pub goal: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            count: 4,
            radius_range: (3.0, 9.0),
            x_range: (12.0, 48.0),
            y_range: (0.0, 50.0),
            min_gap: 8.0,
            endpoint_clearance: 10.0,
            start: SystemState::new(5.0, 25.0, 0.0, 2.0),
            goal: (55.0, 25.1),
        }
    }
}

/// Draws a map whose obstacles leave wide passages between each other and
/// keep clear of the endpoints, so no trap can form even after the obstacles
/// have drifted for a whole episode.
pub fn trap_free_scenario(seed: u64, gen: &GeneratorConfig) -> Result<ExplorationScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let endpoints = [(gen.start.x, gen.start.y), gen.goal];
    let mut placed: Vec<MovingObstacle> = Vec::new();
    let mut attempts = 0;
    while placed.len() < gen.count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidParameter(format!(
                "could not place {} trap-free obstacles with seed {seed}",
                gen.count
            )));
        }
        let radius = rng.gen_range(gen.radius_range.0..=gen.radius_range.1);
        let center = (
            rng.gen_range(gen.x_range.0..=gen.x_range.1),
            rng.gen_range(gen.y_range.0..=gen.y_range.1),
        );
        let clear_ends = endpoints
            .iter()
            .all(|e| (center.0 - e.0).hypot(center.1 - e.1) - radius >= gen.endpoint_clearance);
        let clear_others = placed
            .iter()
            .all(|o| (center.0 - o.center.0).hypot(center.1 - o.center.1) - radius - o.radius >= gen.min_gap);
        if clear_ends && clear_others {
            placed.push(MovingObstacle {
                center,
                radius,
                motion_seed: rng.gen(),
            });
        }
    }
    Ok(ExplorationScenario {
        start: gen.start,
        goal: gen.goal,
        obstacles: placed,
        sensor: SensorSpec::default(),
        motion_step: default_motion_step(),
        inflate: true,
        t_final: default_t_final(),
        controller: ControllerConfig::default(),
    })
}
