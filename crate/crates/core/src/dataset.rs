//! Sampling of the class-K parameter box and labelled training sets.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ClassKParams;
use crate::controller::Scenario;
use crate::error::{Error, Result};
use crate::persist::{read_to_string, write_atomic};

/// Upper ends of the sampling box; every component is drawn from `(0, hi]`.
pub const P_MAX: f64 = 3.0;
pub const Q_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Feasible,
    Infeasible,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Feasible => 1.0,
            Label::Infeasible => -1.0,
        }
    }

    fn code(self) -> i8 {
        self.sign() as i8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilitySample {
    pub params: ClassKParams,
    /// `None` for discarded samples.
    pub label: Option<Label>,
    /// Robustness metric, present iff the label is feasible.
    pub d: Option<f64>,
    pub discarded: bool,
}

impl FeasibilitySample {
    pub fn is_feasible(&self) -> bool {
        self.label == Some(Label::Feasible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityDataset {
    pub samples: Vec<FeasibilitySample>,
    pub seed: u64,
    pub scenario: Scenario,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    seed: u64,
    count: usize,
    labelled: usize,
    discarded: usize,
    feasible_fraction: f64,
    scenario: Scenario,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    p1: f64,
    p2: f64,
    q1: f64,
    q2: f64,
    label: i8,
    #[serde(rename = "D")]
    d: Option<f64>,
}

/// I.i.d. uniform draws with `p ∈ (0, 3]` and `q ∈ (0, 2]`, drawn in the
/// order p1, p2, q1, q2. Longer runs extend shorter ones under the same seed.
pub fn sample_params(count: usize, seed: u64) -> Vec<ClassKParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            // 1 - U[0,1) lies in (0, 1].
            let mut draw = |hi: f64| hi * (1.0 - rng.gen::<f64>());
            let v = [draw(P_MAX), draw(P_MAX), draw(Q_MAX), draw(Q_MAX)];
            ClassKParams::from_vector(v).expect("sampled parameters are positive")
        })
        .collect()
}

/// Labels one parameter vector on `scenario`.
pub fn label_params(params: &ClassKParams, scenario: &Scenario) -> Result<FeasibilitySample> {
    let rec = scenario.rollout(params)?;
    let discarded = rec.discarded();
    let label = (!discarded).then(|| if rec.feasible { Label::Feasible } else { Label::Infeasible });
    Ok(FeasibilitySample {
        params: params.clone(),
        label,
        d: if rec.feasible { rec.robustness } else { None },
        discarded,
    })
}

/// Samples `count` parameter vectors and labels each by a rollout. Rollouts
/// run in parallel; the result order follows the sample order.
pub fn build_dataset(count: usize, seed: u64, scenario: &Scenario) -> Result<FeasibilityDataset> {
    if count == 0 {
        return Err(Error::InvalidParameter("sample count must be positive".into()));
    }
    scenario.controller.validate()?;
    let params = sample_params(count, seed);
    let samples = params
        .par_iter()
        .map(|p| label_params(p, scenario))
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "labelled {} samples ({} discarded) on seed {seed}",
        samples.len(),
        samples.iter().filter(|s| s.discarded).count()
    );
    Ok(FeasibilityDataset {
        samples,
        seed,
        scenario: scenario.clone(),
    })
}

/// Seed of the held-out evaluation pool paired with a training seed.
pub fn holdout_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

impl FeasibilityDataset {
    /// The dataset `build_dataset` would return for the first `n` draws.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            seed: self.seed,
            scenario: self.scenario.clone(),
        }
    }

    /// Parameters of the feasible samples, in draw order.
    pub fn feasible_params(&self) -> Vec<ClassKParams> {
        self.labelled()
            .filter(|s| s.is_feasible())
            .map(|s| s.params.clone())
            .collect()
    }

    /// Non-discarded samples.
    pub fn labelled(&self) -> impl Iterator<Item = &FeasibilitySample> {
        self.samples.iter().filter(|s| s.label.is_some())
    }

    pub fn feasible_fraction(&self) -> f64 {
        let (mut n, mut pos) = (0usize, 0usize);
        for s in self.labelled() {
            n += 1;
            pos += s.is_feasible() as usize;
        }
        if n == 0 {
            0.0
        } else {
            pos as f64 / n as f64
        }
    }

    /// Smallest robustness metric among feasible samples.
    pub fn best(&self) -> Option<(&ClassKParams, f64)> {
        self.labelled()
            .filter_map(|s| s.d.map(|d| (&s.params, d)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Feature rows and ±1 targets for classifier training.
    pub fn training_set(&self) -> (Vec<[f64; 4]>, Vec<f64>) {
        self.labelled()
            .map(|s| (s.params.to_vector(), s.label.map_or(0.0, Label::sign)))
            .unzip()
    }

    /// CSV of the labelled samples; discarded samples are omitted.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        for s in self.labelled() {
            let [p1, p2, q1, q2] = s.params.to_vector();
            out.serialize(CsvRow {
                p1,
                p2,
                q1,
                q2,
                label: s.label.map_or(0, Label::code),
                d: s.d,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `path` (CSV) and its JSON sidecar (same stem, `.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(path, &buf)?;
        let side = Sidecar {
            seed: self.seed,
            count: self.samples.len(),
            labelled: self.labelled().count(),
            discarded: self.samples.iter().filter(|s| s.discarded).count(),
            feasible_fraction: self.feasible_fraction(),
            scenario: self.scenario.clone(),
        };
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
    }

    /// Reads a dataset written by [`FeasibilityDataset::save`]. Only the
    /// labelled samples are restored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let side_path = sidecar_path(path);
        let side: Sidecar = serde_json::from_str(&read_to_string(&side_path)?)?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut samples = Vec::new();
        for row in rdr.deserialize() {
            let row: CsvRow = row?;
            let label = match row.label {
                1 => Label::Feasible,
                -1 => Label::Infeasible,
                other => {
                    return Err(Error::File {
                        path: path.to_path_buf(),
                        message: format!("label {other} is not 1 or -1"),
                    })
                }
            };
            if (label == Label::Feasible) != row.d.is_some() {
                return Err(Error::File {
                    path: path.to_path_buf(),
                    message: "D must be present exactly for feasible rows".into(),
                });
            }
            samples.push(FeasibilitySample {
                params: ClassKParams::from_vector([row.p1, row.p2, row.q1, row.q2])?,
                label: Some(label),
                d: row.d,
                discarded: false,
            });
        }
        Ok(Self {
            samples,
            seed: side.seed,
            scenario: side.scenario,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
