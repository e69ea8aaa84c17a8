//! Brute-force oracles and randomised checks shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use hocbf_core::constraints::{circular_obstacle_hocbf, ClassKParams, ConstraintTag, LinearConstraint};
use hocbf_core::dynamics::{step, unicycle, ControlInput, SystemState};
use hocbf_core::solvers::{
    check_feasible, max_violation, solve_lp, solve_qp, LpInstance, LpStatus, QpInstance, QpStatus, FEASIBILITY_TOL, KKT_TOL,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All constraints as `a·z ≥ b` halfspaces, box bounds included.
pub fn halfspaces(rows: &[LinearConstraint], bounds: &[(f64, f64)]) -> Vec<(Vec<f64>, f64)> {
    let n = bounds.len();
    let mut out: Vec<(Vec<f64>, f64)> = rows
        .iter()
        .map(|r| {
            let (a, c) = r.as_geq();
            (a, -c)
        })
        .collect();
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        out.push((e.clone(), lo));
        e[j] = -1.0;
        out.push((e, -hi));
    }
    out
}

pub fn feasible(hs: &[(Vec<f64>, f64)], z: &[f64], tol: f64) -> bool {
    hs.iter().all(|(a, b)| {
        let v: f64 = a.iter().zip(z).map(|(x, y)| x * y).sum();
        v >= b - tol
    })
}

pub fn subsets(len: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for i in 0..len {
        let mut more = Vec::new();
        for s in &out {
            if s.len() < max {
                let mut t = s.clone();
                t.push(i);
                more.push(t);
            }
        }
        out.extend(more);
    }
    out
}

/// Minimum over all active sets of the equality-constrained minimiser that
/// stays feasible. For a strictly convex QP this is the global optimum.
pub fn qp_oracle(inst: &QpInstance) -> Option<(Vec<f64>, f64)> {
    let n = inst.dim();
    let hs = halfspaces(&inst.rows, &inst.bounds);
    let h = DMatrix::from_fn(n, n, |i, j| inst.hessian[i][j]);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for set in subsets(hs.len(), n) {
        let k = set.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        for i in 0..n {
            rhs[i] = -inst.linear[i];
        }
        for (w, &ci) in set.iter().enumerate() {
            for j in 0..n {
                kkt[(n + w, j)] = hs[ci].0[j];
                kkt[(j, n + w)] = hs[ci].0[j];
            }
            rhs[n + w] = hs[ci].1;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z: Vec<f64> = sol.iter().take(n).copied().collect();
        if !z.iter().all(|v| v.is_finite()) || !feasible(&hs, &z, 1e-9) {
            continue;
        }
        let f = inst.objective(&z);
        if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best = Some((z, f));
        }
    }
    best
}

/// Minimum cost over all vertices of the boxed polytope.
pub fn lp_oracle(inst: &LpInstance) -> Option<f64> {
    let n = inst.bounds.len();
    let hs = halfspaces(&inst.rows, &inst.bounds);
    let mut best: Option<f64> = None;
    for set in subsets(hs.len(), n).into_iter().filter(|s| s.len() == n) {
        let a = DMatrix::from_fn(n, n, |i, j| hs[set[i]].0[j]);
        let b = DVector::from_fn(n, |i, _| hs[set[i]].1);
        let Some(x) = a.lu().solve(&b) else { continue };
        let x: Vec<f64> = x.iter().copied().collect();
        if !x.iter().all(|v| v.is_finite()) || !feasible(&hs, &x, 1e-9) {
            continue;
        }
        let f: f64 = inst.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
        best = Some(best.map_or(f, |b: f64| b.min(f)));
    }
    best
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<LinearConstraint> {
    (0..m)
        .map(|i| {
            let coeffs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let constant = rng.gen_range(-1.5..1.0);
            if rng.gen_bool(0.5) {
                LinearConstraint::geq(coeffs, constant, ConstraintTag::Hocbf(i))
            } else {
                LinearConstraint::leq(coeffs, constant, ConstraintTag::Clf(i))
            }
        })
        .collect()
}

pub fn random_bounds(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let lo = rng.gen_range(-2.0..0.5);
            (lo, lo + rng.gen_range(0.2..3.0))
        })
        .collect()
}

pub fn random_qp(rng: &mut ChaCha8Rng) -> QpInstance {
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(0..=6);
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = l.transpose() * &l + DMatrix::identity(n, n) * 0.1;
    QpInstance {
        hessian: (0..n).map(|i| (0..n).map(|j| h[(i, j)]).collect()).collect(),
        linear: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        rows: random_rows(rng, n, m),
        bounds: random_bounds(rng, n),
    }
}

pub fn random_lp(rng: &mut ChaCha8Rng) -> LpInstance {
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(0..=6);
    LpInstance {
        cost: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        rows: random_rows(rng, n, m),
        bounds: random_bounds(rng, n),
    }
}

/// Solves `cases` random QPs and compares them with the oracle to 1e-6.
/// Returns the (optimal, infeasible) counts.
pub fn check_qp_cases(seed: u64, cases: usize) -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut optimal, mut infeasible) = (0, 0);
    for case in 0..cases {
        let inst = random_qp(&mut rng);
        let sol = solve_qp(&inst).map_err(|e| format!("case {case}: {e}"))?;
        match (qp_oracle(&inst), sol.status) {
            (Some((z, f)), QpStatus::Optimal) => {
                optimal += 1;
                let got = inst.objective(&sol.primal);
                if (got - f).abs() > 1e-6 {
                    return Err(format!("case {case}: objective {got} vs oracle {f}"));
                }
                if sol.primal.iter().zip(&z).any(|(a, b)| (a - b).abs() > 1e-6) {
                    return Err(format!("case {case}: primal {:?} vs {:?}", sol.primal, z));
                }
                if sol.kkt_residual > KKT_TOL {
                    return Err(format!("case {case}: kkt {}", sol.kkt_residual));
                }
                let viol = max_violation(&inst.rows, &sol.primal);
                if viol > FEASIBILITY_TOL {
                    return Err(format!("case {case}: violation {viol}"));
                }
            }
            (None, QpStatus::Infeasible) => {
                infeasible += 1;
                let cert = sol.certificate.ok_or(format!("case {case}: no certificate"))?;
                if cert.verify(&inst.rows, &inst.bounds) < 1e-10 || cert.row_weights.iter().any(|w| *w < 0.0) {
                    return Err(format!("case {case}: bad certificate, margin {}", cert.margin));
                }
            }
            (oracle, status) => return Err(format!("case {case}: solver {status:?} but oracle {oracle:?}")),
        }
    }
    Ok((optimal, infeasible))
}

/// Solves `cases` random LPs and compares them with vertex enumeration.
pub fn check_lp_cases(seed: u64, cases: usize) -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut optimal, mut infeasible) = (0, 0);
    for case in 0..cases {
        let inst = random_lp(&mut rng);
        let sol = solve_lp(&inst).map_err(|e| format!("case {case}: {e}"))?;
        let feasible = check_feasible(&inst.rows, &inst.bounds).map_err(|e| e.to_string())?;
        match (lp_oracle(&inst), sol.status) {
            (Some(f), LpStatus::Optimal) => {
                optimal += 1;
                if (sol.objective - f).abs() > 1e-6 {
                    return Err(format!("case {case}: {} vs {f}", sol.objective));
                }
                let viol = max_violation(&inst.rows, &sol.x);
                if viol > FEASIBILITY_TOL || !feasible {
                    return Err(format!("case {case}: violation {viol}"));
                }
            }
            (None, LpStatus::Infeasible) => {
                infeasible += 1;
                let cert = sol.certificate.ok_or(format!("case {case}: no certificate"))?;
                if cert.verify(&inst.rows, &inst.bounds) < 1e-10 || feasible {
                    return Err(format!("case {case}: bad certificate, margin {}", cert.margin));
                }
            }
            (oracle, status) => return Err(format!("case {case}: solver {status:?} but oracle {oracle:?}")),
        }
    }
    Ok((optimal, infeasible))
}

/// Worst relative error of the closed-form `L_f b` and of
/// `L_f^2 b + L_g L_f b · u` against centred differences along fine
/// unicycle trajectories, for several starts and controls, with the
/// number of stencils checked.
pub fn lie_fd_worst_error(seed: u64, runs: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = unicycle();
    let h = 1e-4;
    let params = ClassKParams::from_vector([1.0, 1.0, 1.0, 1.0]).unwrap();
    let spec = circular_obstacle_hocbf(0, (32.0, 25.0), 7.0, params).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..runs {
        let u = ControlInput::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.5..0.5));
        let mut s = SystemState::new(
            rng.gen_range(0.0..15.0),
            rng.gen_range(15.0..35.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.5..2.0),
        );
        let mut prev = s;
        for k in 1..=10_000 {
            let next = step(&model, s, u, h).unwrap();
            if k % 500 == 0 {
                if s.v <= 0.05 {
                    break;
                }
                let lie = spec.barrier.lie(&s).unwrap();
                let b_dot = (spec.barrier_value(&next) - spec.barrier_value(&prev)) / (2.0 * h);
                let lf = |x: &SystemState| spec.barrier.lie(x).unwrap().lf[0];
                let b_ddot = (lf(&next) - lf(&prev)) / (2.0 * h);
                let model_ddot = lie.lf[1] + lie.lg[0] * u.u1 + lie.lg[1] * u.u2;
                worst = worst.max(((lie.lf[0] - b_dot) / b_dot.abs().max(1e-2)).abs());
                worst = worst.max(((model_ddot - b_ddot) / b_ddot.abs().max(1e-2)).abs());
                checked += 1;
            }
            prev = s;
            s = next;
        }
    }
    (worst, checked)
}
