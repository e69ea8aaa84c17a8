//! Run configuration shared by every pipeline stage, read from TOML.
//!
//! Every section is optional and defaults to the robot case study. Unknown
//! keys are rejected. Relative paths are resolved against the directory of
//! the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::SvmConfig;
use crate::constraints::ClassKParams;
use crate::controller::{ControllerConfig, Obstacle, Scenario};
use crate::dynamics::SystemState;
use crate::error::{Error, Result};
use crate::exploration::{trap_free_scenario, ExplorationScenario, GeneratorConfig, SensorSpec};
use crate::persist::read_to_string;
use crate::tuner::TunerConfig;

/// Class-K parameters `(p1, p2, q1, q2)` reported as the tuned optimum of the
/// training map.
pub const TUNED_PARAMS: [f64; 4] = [0.7426, 1.9745, 1.9148, 0.7024];

/// Start and obstacles of a map file; controller settings come from the
/// run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleMap {
    pub start: SystemState,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    /// Episode seeds; with generated maps each seed also draws its own map.
    pub seeds: Vec<u64>,
    /// Fixed scenario file. When absent, trap-free maps are generated.
    pub map: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub motion_step: f64,
    pub inflate: bool,
    pub t_final: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            map: None,
            generator: GeneratorConfig::default(),
            motion_step: 0.05,
            inflate: true,
            t_final: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Training-set sizes of the comparison table.
    pub sample_sizes: Vec<usize>,
    /// Rollouts whose QP steps are timed.
    pub timing_rollouts: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sample_sizes: vec![500, 1000, 2000, 3000, 4000],
            timing_rollouts: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory of every stage.
    pub out: PathBuf,
    /// Map file for simulate/sample/tune. When absent, the training map.
    pub scenario: Option<PathBuf>,
    /// Class-K parameters of `simulate` and `explore`, as `[p1, p2, q1, q2]`.
    pub params: [f64; 4],
    /// Size `M` of the sampled dataset.
    pub samples: usize,
    /// Size of the held-out pool used to score the classifier; 0 skips it.
    pub holdout: usize,
    pub controller: ControllerConfig,
    pub svm: SvmConfig,
    pub tuner: TunerConfig,
    pub sensor: SensorSpec,
    pub exploration: ExplorationConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            scenario: None,
            params: TUNED_PARAMS,
            samples: 3000,
            holdout: 1000,
            controller: ControllerConfig::default(),
            svm: SvmConfig::default(),
            tuner: TunerConfig::default(),
            sensor: SensorSpec::default(),
            exploration: ExplorationConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parses `path`, resolves relative paths against its directory and
    /// validates the result.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&read_to_string(path)?).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out);
        cfg.scenario.as_mut().map(resolve);
        cfg.exploration.map.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.svm.kernel.validate()?;
        self.tuner.validate()?;
        self.sensor.validate()?;
        self.class_k()?;
        if self.samples == 0 {
            return Err(Error::InvalidParameter("samples must be positive".into()));
        }
        if self.exploration.seeds.is_empty() {
            return Err(Error::InvalidParameter("exploration.seeds is empty".into()));
        }
        if !(self.exploration.motion_step >= 0.0 && self.exploration.t_final > 0.0) {
            return Err(Error::InvalidParameter("exploration motion_step/t_final out of range".into()));
        }
        if self.bench.sample_sizes.iter().any(|&m| m == 0) {
            return Err(Error::InvalidParameter("bench.sample_sizes must be positive".into()));
        }
        for p in self.scenario.iter().chain(&self.exploration.map) {
            if !p.is_file() {
                return Err(Error::File {
                    path: p.clone(),
                    message: "referenced file does not exist".into(),
                });
            }
        }
        Ok(())
    }

    pub fn class_k(&self) -> Result<ClassKParams> {
        ClassKParams::from_vector(self.params)
    }

    /// The map of simulate/sample/tune with this config's controller.
    pub fn scenario(&self) -> Result<Scenario> {
        let mut sc = match &self.scenario {
            None => Scenario::training(),
            Some(p) => {
                let map: ObstacleMap = serde_json::from_str(&read_to_string(p)?).map_err(|e| Error::File {
                    path: p.clone(),
                    message: e.to_string(),
                })?;
                Scenario {
                    start: map.start,
                    obstacles: map.obstacles,
                    controller: ControllerConfig::default(),
                }
            }
        };
        sc.controller = self.controller.clone();
        Ok(sc)
    }

    /// Exploration map of one episode seed. A map file keeps its own
    /// sensor and timing; generated maps take them from this config.
    pub fn exploration_scenario(&self, seed: u64) -> Result<ExplorationScenario> {
        if let Some(p) = &self.exploration.map {
            return ExplorationScenario::load(p);
        }
        let mut sc = trap_free_scenario(seed, &self.exploration.generator)?;
        sc.sensor = self.sensor;
        sc.motion_step = self.exploration.motion_step;
        sc.inflate = self.exploration.inflate;
        sc.t_final = self.exploration.t_final;
        sc.controller = self.controller.clone();
        Ok(sc)
    }
}
