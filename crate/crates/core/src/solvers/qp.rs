//! Primal active-set method for strictly convex dense QPs:
//!
//! ```text
//! minimize    ½ zᵀ H z + cᵀ z
//! subject to  rows (each a·z + c ≥ 0 or ≤ 0),  lo ≤ z ≤ hi
//! ```
//!
//! A feasible start comes from the clipped unconstrained minimiser when it
//! satisfies every row, and from the shared phase-1 simplex otherwise. Each
//! iteration solves the equality-constrained subproblem on the working set
//! in the null space of the working rows.

use serde::{Deserialize, Serialize};

use super::linalg::{dot, min_eigenvalue, solve_dense};
use super::lp::{max_violation, phase_one, PhaseOne};
use super::{validate_bounds, FarkasCertificate};
use crate::constraints::LinearConstraint;
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpInstance {
    /// Symmetric positive semidefinite, row-major.
    pub hessian: Vec<Vec<f64>>,
    pub linear: Vec<f64>,
    pub rows: Vec<LinearConstraint>,
    pub bounds: Vec<(f64, f64)>,
}

impl QpInstance {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let quad: f64 = self.hessian.iter().zip(z).map(|(row, zi)| zi * dot(row, z)).sum();
        0.5 * quad + dot(&self.linear, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub status: QpStatus,
    pub primal: Vec<f64>,
    /// Indices into `rows` held as equalities in the final working set.
    pub active_set: Vec<usize>,
    /// Row multipliers (nonnegative; zero for rows outside the working set).
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub certificate: Option<FarkasCertificate>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

/// `a · z ≥ b`.
struct Halfspace {
    a: Vec<f64>,
    b: f64,
    origin: Origin,
}

fn validate(inst: &QpInstance) -> Result<()> {
    let n = inst.dim();
    if inst.hessian.len() != n || inst.hessian.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!("hessian must be {n} × {n}")));
    }
    if inst.bounds.len() != n {
        return Err(Error::Dimension(format!("{} bounds for {n} variables", inst.bounds.len())));
    }
    for (i, r) in inst.rows.iter().enumerate() {
        if r.coeffs.len() != n {
            return Err(Error::Dimension(format!(
                "row {i} has {} coefficients, expected {n}",
                r.coeffs.len()
            )));
        }
        if !r.is_finite() {
            return Err(Error::non_finite("constraint row", r));
        }
    }
    validate_bounds(&inst.bounds)?;
    if inst
        .linear
        .iter()
        .chain(inst.hessian.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::non_finite("QP objective", (&inst.hessian, &inst.linear)));
    }
    let scale = inst.hessian.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (inst.hessian[i][j] - inst.hessian[j][i]).abs() > 1e-12 * scale {
                return Err(Error::InvalidParameter("hessian is not symmetric".into()));
            }
        }
    }
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || inst.hessian[i][j] == 0.0));
    let min_eig = if diagonal {
        (0..n).map(|i| inst.hessian[i][i]).fold(f64::INFINITY, f64::min)
    } else {
        min_eigenvalue(&inst.hessian)
    };
    if n > 0 && min_eig < -1e-10 * scale {
        return Err(Error::NotPsd { min_pivot: min_eig });
    }
    Ok(())
}

fn halfspaces(inst: &QpInstance) -> Vec<Halfspace> {
    let n = inst.dim();
    let mut out = Vec::with_capacity(inst.rows.len() + 2 * n);
    for (i, r) in inst.rows.iter().enumerate() {
        let (a, c) = r.as_geq();
        out.push(Halfspace {
            a,
            b: -c,
            origin: Origin::Row(i),
        });
    }
    for (j, &(lo, hi)) in inst.bounds.iter().enumerate() {
        if lo.is_finite() {
            let mut a = vec![0.0; n];
            a[j] = 1.0;
            out.push(Halfspace {
                a,
                b: lo,
                origin: Origin::Lower(j),
            });
        }
        if hi.is_finite() {
            let mut a = vec![0.0; n];
            a[j] = -1.0;
            out.push(Halfspace {
                a,
                b: -hi,
                origin: Origin::Upper(j),
            });
        }
    }
    out
}

fn gradient(inst: &QpInstance, z: &[f64]) -> Vec<f64> {
    inst.hessian
        .iter()
        .zip(&inst.linear)
        .map(|(row, c)| dot(row, z) + c)
        .collect()
}

fn clip(z: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in z.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Unconstrained minimiser clipped into the box, if the hessian is nonsingular.
fn clipped_minimiser(inst: &QpInstance) -> Option<Vec<f64>> {
    let n = inst.dim();
    let mut a: Vec<f64> = inst.hessian.iter().flatten().copied().collect();
    let mut z: Vec<f64> = inst.linear.iter().map(|c| -c).collect();
    solve_dense(&mut a, &mut z, n, 1e-13)?;
    clip(&mut z, &inst.bounds);
    Some(z)
}

/// Adds `cand` to `basis` (orthonormalised) if it is independent of it.
fn independent(basis: &mut Vec<Vec<f64>>, cand: &[f64]) -> bool {
    let mut v = cand.to_vec();
    for q in basis.iter() {
        let d = dot(q, &v);
        for (vi, qi) in v.iter_mut().zip(q) {
            *vi -= d * qi;
        }
    }
    let norm = dot(&v, &v).sqrt();
    let scale = dot(cand, cand).sqrt().max(1e-300);
    if norm <= 1e-9 * scale {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    basis.push(v);
    true
}

/// Solves the working-set equality QP by the null-space method, returning
/// `(p, λ)`. Orthogonalising the working rows keeps nearly parallel
/// constraints from producing a singular KKT matrix.
fn eqp_step(h: &[Vec<f64>], g: &[f64], cons: &[Halfspace], work: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = g.len();
    let k = work.len();
    // Rows a_w = sum_{j <= w} r[w][j] q_j with orthonormal q_j.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut r = vec![vec![0.0; k]; k];
    for (w, &ci) in work.iter().enumerate() {
        let mut v = cons[ci].a.clone();
        for _ in 0..2 {
            for (j, qj) in q.iter().enumerate() {
                let d = dot(qj, &v);
                r[w][j] += d;
                v.iter_mut().zip(qj).for_each(|(vi, qi)| *vi -= d * qi);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if !(norm > 1e-300) {
            return None;
        }
        r[w][w] = norm;
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(n - k.min(n));
    for e in 0..n {
        if q.len() + z.len() == n {
            break;
        }
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in q.iter().chain(z.iter()) {
                let d = dot(b, &v);
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= d * bi);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            z.push(v);
        }
    }
    let m = z.len();
    let hz: Vec<Vec<f64>> = z.iter().map(|zc| h.iter().map(|row| dot(row, zc)).collect()).collect();
    let mut red = vec![0.0; m * m];
    let mut y: Vec<f64> = z.iter().map(|zc| -dot(zc, g)).collect();
    for i in 0..m {
        for j in 0..m {
            red[i * m + j] = dot(&z[i], &hz[j]);
        }
    }
    solve_dense(&mut red, &mut y, m, 1e-13)?;
    let mut p = vec![0.0; n];
    for (zc, yi) in z.iter().zip(&y) {
        p.iter_mut().zip(zc).for_each(|(pi, zi)| *pi += yi * zi);
    }
    // A_w^T lambda = H p + g, i.e. R^T lambda = Q (H p + g).
    let resid: Vec<f64> = h.iter().zip(g).map(|(row, gi)| dot(row, &p) + gi).collect();
    let mut lambda: Vec<f64> = q.iter().map(|qj| dot(qj, &resid)).collect();
    for w in (0..k).rev() {
        let mut acc = lambda[w];
        for j in w + 1..k {
            acc -= r[j][w] * lambda[j];
        }
        lambda[w] = acc / r[w][w];
    }
    Some((p, lambda))
}

pub fn solve_qp(inst: &QpInstance) -> Result<QpSolution> {
    validate(inst)?;
    let n = inst.dim();
    let cons = halfspaces(inst);

    let mut z = match clipped_minimiser(inst).filter(|z| max_violation(&inst.rows, z) == 0.0) {
        Some(z) => z,
        None => match phase_one(&inst.rows, &inst.bounds)? {
            PhaseOne::Feasible(z) => z,
            PhaseOne::Infeasible(cert) => {
                return Ok(QpSolution {
                    status: QpStatus::Infeasible,
                    primal: vec![0.0; n],
                    active_set: Vec::new(),
                    multipliers: vec![0.0; inst.rows.len()],
                    kkt_residual: f64::INFINITY,
                    certificate: Some(cert),
                })
            }
        },
    };

    let mut work: Vec<usize> = Vec::new();
    let mut span = Vec::new();
    for (i, c) in cons.iter().enumerate() {
        if work.len() == n {
            break;
        }
        if (dot(&c.a, &z) - c.b).abs() <= 1e-10 * (1.0 + c.b.abs()) && independent(&mut span, &c.a) {
            work.push(i);
        }
    }

    let mut lambda_w = Vec::new();
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let g = gradient(inst, &z);
        let (p, lambda) = eqp_step(&inst.hessian, &g, &cons, &work).ok_or(Error::SingularKkt)?;
        let zscale = 1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let pnorm = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pnorm <= 1e-12 * zscale {
            let worst = lambda
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -1e-12)
                .min_by(|a, b| a.1.total_cmp(b.1));
            match worst {
                None => {
                    lambda_w = lambda;
                    converged = true;
                    break;
                }
                Some((w, _)) => {
                    work.remove(w);
                }
            }
            continue;
        }
        let p2 = dot(&p, &p).sqrt();
        let mut alpha = 1.0;
        let mut blocking = None;
        for (i, c) in cons.iter().enumerate() {
            if work.contains(&i) {
                continue;
            }
            let ap = dot(&c.a, &p);
            // Near-orthogonal directions are treated as non-blocking; adding
            // them would make the working set numerically dependent.
            if ap < -1e-9 * p2 * dot(&c.a, &c.a).sqrt() {
                let ratio = ((c.b - dot(&c.a, &z)) / ap).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }
        }
        for (zi, pi) in z.iter_mut().zip(&p) {
            *zi += alpha * pi;
        }
        if let Some(i) = blocking {
            work.push(i);
        }
    }
    if !converged {
        return Err(Error::IterationLimit(MAX_ITERATIONS));
    }
    clip(&mut z, &inst.bounds);

    let mut all_lambda = vec![0.0; cons.len()];
    for (w, &ci) in work.iter().enumerate() {
        all_lambda[ci] = lambda_w[w].max(0.0);
    }
    let mut multipliers = vec![0.0; inst.rows.len()];
    let mut active_set = Vec::new();
    for (ci, c) in cons.iter().enumerate() {
        if let Origin::Row(r) = c.origin {
            multipliers[r] = all_lambda[ci];
            if work.contains(&ci) {
                active_set.push(r);
            }
        }
    }
    active_set.sort_unstable();

    let kkt_residual = kkt_residual(inst, &cons, &z, &all_lambda);
    Ok(QpSolution {
        status: QpStatus::Optimal,
        primal: z,
        active_set,
        multipliers,
        kkt_residual,
        certificate: None,
    })
}

/// Max of stationarity, primal infeasibility, dual infeasibility and
/// complementarity violations.
fn kkt_residual(inst: &QpInstance, cons: &[Halfspace], z: &[f64], lambda: &[f64]) -> f64 {
    let mut station = gradient(inst, z);
    let mut worst: f64 = 0.0;
    for (c, l) in cons.iter().zip(lambda) {
        let slack = dot(&c.a, z) - c.b;
        worst = worst.max((-slack).max(0.0)).max((-l).max(0.0)).max((l * slack).abs());
        for (s, a) in station.iter_mut().zip(&c.a) {
            *s -= l * a;
        }
    }
    station.iter().fold(worst, |m, s| m.max(s.abs()))
}
