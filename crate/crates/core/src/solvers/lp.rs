//! Bounded-variable primal simplex.
//!
//! Rows are brought to the form `a·x − s = −c` with a slack `s ≥ 0`; rows that
//! the resting point violates get an artificial variable for phase 1.
//! Structural variables rest at 0 when 0 lies inside their box, otherwise at
//! the nearer bound. Entering and leaving choices use lowest-index rules so
//! results are reproducible and cycling cannot occur.

use serde::{Deserialize, Serialize};

use super::{validate_bounds, FarkasCertificate, FEASIBILITY_TOL};
use crate::constraints::LinearConstraint;
use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpInstance {
    pub cost: Vec<f64>,
    pub rows: Vec<LinearConstraint>,
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub certificate: Option<FarkasCertificate>,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// Result of a phase-1 search over `rows` and the box.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseOne {
    Feasible(Vec<f64>),
    Infeasible(FarkasCertificate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic at 0 strictly inside its box.
    AtZero,
}

struct Tableau {
    n: usize,
    m: usize,
    cols: usize,
    /// `B⁻¹A`, row-major `m × cols`.
    tab: Vec<f64>,
    basis: Vec<usize>,
    value: Vec<f64>,
    status: Vec<Status>,
    lb: Vec<f64>,
    ub: Vec<f64>,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn slack(&self, i: usize) -> usize {
        self.n + i
    }

    fn art(&self, i: usize) -> usize {
        self.n + self.m + i
    }

    fn new(rows: &[(Vec<f64>, f64)], bounds: &[(f64, f64)]) -> Self {
        let n = bounds.len();
        let m = rows.len();
        let cols = n + 2 * m;
        let mut t = Tableau {
            n,
            m,
            cols,
            tab: vec![0.0; m * cols],
            basis: vec![0; m],
            value: vec![0.0; cols],
            status: vec![Status::AtLower; cols],
            lb: vec![0.0; cols],
            ub: vec![f64::INFINITY; cols],
        };
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            t.lb[j] = lo;
            t.ub[j] = hi;
            let (v, st) = if lo < 0.0 && hi > 0.0 {
                (0.0, Status::AtZero)
            } else if lo >= 0.0 {
                (lo, Status::AtLower)
            } else {
                (hi, Status::AtUpper)
            };
            t.value[j] = v;
            t.status[j] = if lo == hi { Status::AtLower } else { st };
        }
        for (i, (a, c)) in rows.iter().enumerate() {
            // a·x − s + art = rhs, rhs = −c
            let rhs = -c;
            let ax: f64 = a.iter().zip(&t.value[..n]).map(|(p, q)| p * q).sum();
            let resid = ax - rhs;
            let (s, r) = (t.slack(i), t.art(i));
            let row = &mut t.tab[i * cols..(i + 1) * cols];
            if resid >= 0.0 {
                // Basic slack, column −e_i: divide the row by −1.
                for (j, aj) in a.iter().enumerate() {
                    row[j] = -aj;
                }
                row[s] = 1.0;
                row[r] = -1.0;
                t.basis[i] = s;
                t.status[s] = Status::Basic;
                t.value[s] = resid;
                t.ub[r] = 0.0;
            } else {
                row[..n].copy_from_slice(a);
                row[s] = -1.0;
                row[r] = 1.0;
                t.basis[i] = r;
                t.status[r] = Status::Basic;
                t.value[r] = -resid;
            }
        }
        t
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb == 0.0 {
                continue;
            }
            let row = &self.tab[i * self.cols..(i + 1) * self.cols];
            for (dj, t) in d.iter_mut().zip(row) {
                *dj -= cb * t;
            }
        }
        d
    }

    fn run(&mut self, cost: &[f64]) -> Result<Outcome> {
        let scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
        let dtol = 1e-11 * scale;
        for _ in 0..MAX_ITERATIONS {
            let d = self.reduced_costs(cost);
            let entering = (0..self.cols).find_map(|j| {
                if self.lb[j] == self.ub[j] {
                    return None;
                }
                match self.status[j] {
                    Status::Basic => None,
                    Status::AtLower if d[j] < -dtol => Some((j, 1.0)),
                    Status::AtUpper if d[j] > dtol => Some((j, -1.0)),
                    Status::AtZero if d[j].abs() > dtol => Some((j, -d[j].signum())),
                    _ => None,
                }
            });
            let Some((e, dir)) = entering else {
                return Ok(Outcome::Optimal);
            };

            let own = if dir > 0.0 {
                self.ub[e] - self.value[e]
            } else {
                self.value[e] - self.lb[e]
            };
            let mut best_t = f64::INFINITY;
            let mut leave: Option<(usize, bool)> = None;
            for i in 0..self.m {
                let delta = -self.tab[i * self.cols + e] * dir;
                let b = self.basis[i];
                let limit = if delta < -PIVOT_TOL {
                    Some(((self.value[b] - self.lb[b]) / -delta, false))
                } else if delta > PIVOT_TOL && self.ub[b].is_finite() {
                    Some(((self.ub[b] - self.value[b]) / delta, true))
                } else {
                    None
                };
                if let Some((t, to_upper)) = limit {
                    let t = t.max(0.0);
                    let better = t < best_t || (t == best_t && leave.is_some_and(|(r, _)| b < self.basis[r]));
                    if better {
                        best_t = t;
                        leave = Some((i, to_upper));
                    }
                }
            }

            if own <= best_t {
                if !own.is_finite() {
                    return Ok(Outcome::Unbounded);
                }
                self.shift(e, dir * own);
                let (v, st) = if dir > 0.0 {
                    (self.ub[e], Status::AtUpper)
                } else {
                    (self.lb[e], Status::AtLower)
                };
                self.value[e] = v;
                self.status[e] = st;
                continue;
            }
            let Some((r, to_upper)) = leave else {
                return Ok(Outcome::Unbounded);
            };
            self.shift(e, dir * best_t);
            let out = self.basis[r];
            if to_upper {
                self.value[out] = self.ub[out];
                self.status[out] = Status::AtUpper;
            } else {
                self.value[out] = self.lb[out];
                self.status[out] = Status::AtLower;
            }
            self.pivot(r, e);
        }
        Err(Error::IterationLimit(MAX_ITERATIONS))
    }

    /// Moves nonbasic `e` by `step`, updating basic values along its column.
    fn shift(&mut self, e: usize, step: f64) {
        if step == 0.0 {
            return;
        }
        self.value[e] += step;
        for i in 0..self.m {
            let b = self.basis[i];
            self.value[b] -= self.tab[i * self.cols + e] * step;
        }
    }

    fn pivot(&mut self, r: usize, e: usize) {
        let cols = self.cols;
        let p = self.tab[r * cols + e];
        for k in 0..cols {
            self.tab[r * cols + k] /= p;
        }
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.tab[i * cols + e];
            if f == 0.0 {
                continue;
            }
            for k in 0..cols {
                self.tab[i * cols + k] -= f * self.tab[r * cols + k];
            }
        }
        self.basis[r] = e;
        self.status[e] = Status::Basic;
    }

    fn structural(&self) -> Vec<f64> {
        self.value[..self.n]
            .iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }
}

fn geq_rows(rows: &[LinearConstraint], n: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.coeffs.len() != n {
                return Err(Error::Dimension(format!(
                    "row {i} has {} coefficients, expected {n}",
                    r.coeffs.len()
                )));
            }
            if !r.is_finite() {
                return Err(Error::non_finite("constraint row", r));
            }
            Ok(r.as_geq())
        })
        .collect()
}

/// Largest violation of `rows` at `x` (0 when all hold).
pub fn max_violation(rows: &[LinearConstraint], x: &[f64]) -> f64 {
    rows.iter().map(|r| (-r.slack(x)).max(0.0)).fold(0.0, f64::max)
}

fn phase_one_tableau(rows: &[LinearConstraint], bounds: &[(f64, f64)]) -> Result<(Tableau, PhaseOne)> {
    validate_bounds(bounds)?;
    let geq = geq_rows(rows, bounds.len())?;
    let mut t = Tableau::new(&geq, bounds);
    let mut cost = vec![0.0; t.cols];
    for i in 0..t.m {
        let a = t.art(i);
        if t.ub[a] > 0.0 {
            cost[a] = 1.0;
        }
    }
    if cost.iter().any(|c| *c != 0.0) {
        if let Outcome::Unbounded = t.run(&cost)? {
            unreachable!("phase-1 objective is bounded below by 0");
        }
    }
    let x = t.structural();
    if max_violation(rows, &x) <= FEASIBILITY_TOL {
        return Ok((t, PhaseOne::Feasible(x)));
    }
    let d = t.reduced_costs(&cost);
    let weights: Vec<f64> = (0..t.m).map(|i| d[t.slack(i)].max(0.0)).collect();
    let cert = FarkasCertificate::from_row_weights(weights, rows, bounds);
    Ok((t, PhaseOne::Infeasible(cert)))
}

/// Searches for a point satisfying every row within the box.
pub fn phase_one(rows: &[LinearConstraint], bounds: &[(f64, f64)]) -> Result<PhaseOne> {
    phase_one_tableau(rows, bounds).map(|(_, p)| p)
}

/// `true` iff some point in the box satisfies all rows to within 1e-8.
pub fn check_feasible(rows: &[LinearConstraint], bounds: &[(f64, f64)]) -> Result<bool> {
    Ok(matches!(phase_one(rows, bounds)?, PhaseOne::Feasible(_)))
}

pub fn solve_lp(inst: &LpInstance) -> Result<LpSolution> {
    let n = inst.bounds.len();
    if inst.cost.len() != n {
        return Err(Error::Dimension(format!(
            "cost has {} entries but {n} variables are bounded",
            inst.cost.len()
        )));
    }
    if inst.cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::non_finite("LP cost", &inst.cost));
    }
    if inst.bounds.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::InvalidParameter("LP requires a finite box on every variable".into()));
    }
    let (mut t, p1) = phase_one_tableau(&inst.rows, &inst.bounds)?;
    if let PhaseOne::Infeasible(cert) = p1 {
        let x = t.structural();
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            objective: f64::INFINITY,
            x,
            certificate: Some(cert),
        });
    }
    for i in 0..t.m {
        let a = t.art(i);
        t.ub[a] = 0.0;
        if t.status[a] != Status::Basic {
            t.value[a] = 0.0;
            t.status[a] = Status::AtLower;
        }
    }
    let mut cost = vec![0.0; t.cols];
    cost[..n].copy_from_slice(&inst.cost);
    match t.run(&cost)? {
        Outcome::Optimal => {}
        Outcome::Unbounded => unreachable!("structural variables are boxed"),
    }
    let x = t.structural();
    let objective = x.iter().zip(&inst.cost).map(|(a, b)| a * b).sum();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
        certificate: None,
    })
}
