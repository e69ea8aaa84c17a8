//! Small dense solvers: a primal active-set QP and a bounded-variable simplex
//! LP, sharing one phase-1 feasibility search.
//!
//! Tolerances are fixed so that feasibility labels are deterministic:
//! rows hold to [`FEASIBILITY_TOL`] at any reported optimum and every
//! reported optimum has a KKT residual of at most [`KKT_TOL`].

pub(crate) mod linalg;
pub mod lp;
pub mod qp;

use serde::{Deserialize, Serialize};

use crate::constraints::LinearConstraint;
use crate::error::{Error, Result};

pub use lp::{check_feasible, max_violation, phase_one, solve_lp, LpInstance, LpSolution, LpStatus, PhaseOne};
pub use qp::{solve_qp, QpInstance, QpSolution, QpStatus};

pub const FEASIBILITY_TOL: f64 = 1e-8;
pub const KKT_TOL: f64 = 1e-6;

pub(crate) fn validate_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    for (j, (lo, hi)) in bounds.iter().enumerate() {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidParameter(format!(
                "variable {j} has invalid bounds [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Proof that a system of rows plus a box is empty.
///
/// With nonnegative row weights `w` (rows in `a·x + c ≥ 0` form) and the box
/// multipliers `μ_lo = max(−a, 0)`, `μ_hi = max(a, 0)` of the combined row
/// `a = Σ w_i a_i`, the combination
/// `Σ w_i (a_i·x + c_i) + μ_lo·(x − lo) + μ_hi·(hi − x)` has zero coefficients
/// and equals `−margin`. Any feasible point would make it nonnegative, so a
/// positive margin proves infeasibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarkasCertificate {
    pub row_weights: Vec<f64>,
    pub lower_weights: Vec<f64>,
    pub upper_weights: Vec<f64>,
    pub margin: f64,
}

impl FarkasCertificate {
    pub fn from_row_weights(row_weights: Vec<f64>, rows: &[LinearConstraint], bounds: &[(f64, f64)]) -> Self {
        let combined = combine(&row_weights, rows, bounds.len());
        let lower_weights: Vec<f64> = combined.0.iter().map(|a| (-a).max(0.0)).collect();
        let upper_weights: Vec<f64> = combined.0.iter().map(|a| a.max(0.0)).collect();
        let mut cert = Self {
            row_weights,
            lower_weights,
            upper_weights,
            margin: 0.0,
        };
        cert.margin = cert.verify(rows, bounds);
        cert
    }

    /// Recomputes the certified margin; non-positive means the certificate
    /// proves nothing. Coefficient cancellation errors are charged against it.
    pub fn verify(&self, rows: &[LinearConstraint], bounds: &[(f64, f64)]) -> f64 {
        if self
            .row_weights
            .iter()
            .chain(&self.lower_weights)
            .chain(&self.upper_weights)
            .any(|w| !(*w >= 0.0))
        {
            return f64::NEG_INFINITY;
        }
        let (a, c) = combine(&self.row_weights, rows, bounds.len());
        let mut constant = c;
        let mut residual = 0.0;
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            let (ml, mu) = (self.lower_weights[j], self.upper_weights[j]);
            let coeff = a[j] + ml - mu;
            if ml > 0.0 {
                if !lo.is_finite() {
                    return f64::NEG_INFINITY;
                }
                constant -= ml * lo;
            }
            if mu > 0.0 {
                if !hi.is_finite() {
                    return f64::NEG_INFINITY;
                }
                constant += mu * hi;
            }
            if coeff != 0.0 {
                residual += coeff.abs() * lo.abs().max(hi.abs());
            }
        }
        -constant - residual
    }
}

fn combine(weights: &[f64], rows: &[LinearConstraint], n: usize) -> (Vec<f64>, f64) {
    let mut a = vec![0.0; n];
    let mut c = 0.0;
    for (w, row) in weights.iter().zip(rows) {
        if *w == 0.0 {
            continue;
        }
        let (coeffs, constant) = row.as_geq();
        for (aj, cj) in a.iter_mut().zip(coeffs) {
            *aj += w * cj;
        }
        c += w * constant;
    }
    (a, c)
}
