//! Soft-margin SVM with a polynomial kernel, trained by SMO with
//! second-order working-set selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{read_to_string, write_atomic};
use crate::solvers::linalg;

pub const DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    pub c1: f64,
    pub c2: f64,
    pub degree: i32,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            c1: 0.8,
            c2: 0.5,
            degree: 7,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.degree >= 1) {
            return Err(Error::InvalidParameter(format!(
                "kernel needs c1 > 0, c2 > 0, degree >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64; DIM], b: &[f64; DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(c1 + c2·⟨y, z⟩)^degree`.
pub fn kernel(y: &[f64; DIM], z: &[f64; DIM], kp: &KernelParams) -> f64 {
    (kp.c1 + kp.c2 * dot(y, z)).powi(kp.degree)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    pub kernel: KernelParams,
    #[serde(rename = "C")]
    pub c: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub tol: f64,
    /// Iteration cap, in multiples of the training-set size.
    pub max_passes: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            kernel: KernelParams::default(),
            c: 100.0,
            tol: 1e-3,
            max_passes: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: KernelParams,
    #[serde(rename = "C")]
    pub c: f64,
    pub bias: f64,
    pub sv: Vec<[f64; DIM]>,
    /// `αᵢ yᵢ` per support vector.
    pub coef: Vec<f64>,
    #[serde(default)]
    pub training_accuracy: f64,
    /// Maximal KKT violation of the dual at termination.
    #[serde(default)]
    pub kkt_gap: f64,
}

impl SvmModel {
    /// `H(x) = Σ αᵢyᵢ k(svᵢ, x) + b`.
    pub fn decision(&self, x: &[f64; DIM]) -> f64 {
        self.sv
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * kernel(s, x, &self.kernel))
            .sum::<f64>()
            + self.bias
    }

    pub fn decision_gradient(&self, x: &[f64; DIM]) -> [f64; DIM] {
        let kp = &self.kernel;
        let mut g = [0.0; DIM];
        for (s, c) in self.sv.iter().zip(&self.coef) {
            let w = c * kp.degree as f64 * (kp.c1 + kp.c2 * dot(s, x)).powi(kp.degree - 1) * kp.c2;
            for k in 0..DIM {
                g[k] += w * s[k];
            }
        }
        g
    }

    pub fn predict(&self, x: &[f64; DIM]) -> f64 {
        if self.decision(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn evaluate(&self, xs: &[[f64; DIM]], ys: &[f64]) -> Confusion {
        let mut c = Confusion::default();
        for (x, &y) in xs.iter().zip(ys) {
            match (y > 0.0, self.predict(x) > 0.0) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_neg += 1,
                (false, true) => c.false_pos += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&read_to_string(path)?)?;
        m.kernel.validate()?;
        if m.sv.len() != m.coef.len() {
            return Err(Error::Dimension(format!(
                "{} support vectors but {} coefficients",
                m.sv.len(),
                m.coef.len()
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }
}

const TAU: f64 = 1e-12;
const REFINE_EVERY: usize = 2000;
const SHRINK_EVERY: usize = 1000;

/// Recomputes `Qα − e` from the support vectors.
fn rebuild_gradient(k: &[f64], ys: &[f64], alpha: &[f64], grad: &mut [f64]) {
    let n = ys.len();
    grad.iter_mut().for_each(|g| *g = -1.0);
    for s in (0..n).filter(|&s| alpha[s] > 0.0) {
        let w = ys[s] * alpha[s];
        let row = &k[s * n..(s + 1) * n];
        for t in 0..n {
            grad[t] += ys[t] * row[t] * w;
        }
    }
}

/// Newton step on the free variables: solves the equality-constrained dual
/// restricted to `0 < α < C` and moves towards it as far as the box allows.
/// Plain SMO crawls on the badly conditioned high-degree kernel; this step
/// is only taken when it strictly lowers the dual objective.
fn newton_refine(k: &[f64], ys: &[f64], active: &[usize], alpha: &mut [f64], grad: &mut [f64], c: f64) -> bool {
    let n = ys.len();
    let free: Vec<usize> = active.iter().copied().filter(|&t| alpha[t] > 0.0 && alpha[t] < c).collect();
    let f = free.len();
    if f < 2 {
        return false;
    }
    let size = f + 1;
    let mut m = vec![0.0; size * size];
    let mut rhs = vec![0.0; size];
    for (a, &s) in free.iter().enumerate() {
        for (b, &t) in free.iter().enumerate() {
            m[a * size + b] = ys[s] * ys[t] * k[s * n + t];
        }
        m[a * size + f] = -ys[s];
        m[f * size + a] = ys[s];
        rhs[a] = -grad[s];
    }
    if linalg::solve_dense(&mut m, &mut rhs, size, 1e-15).is_none() {
        return false;
    }
    let d = &rhs[..f];
    if !d.iter().all(|v| v.is_finite()) {
        return false;
    }
    let mut step: f64 = 1.0;
    for (a, &s) in free.iter().enumerate() {
        if d[a] > 0.0 {
            step = step.min((c - alpha[s]) / d[a]);
        } else if d[a] < 0.0 {
            step = step.min(-alpha[s] / d[a]);
        }
    }
    if !(step > 0.0) {
        return false;
    }
    // Change of ½αᵀQα − eᵀα along s·d.
    let mut lin = 0.0;
    let mut quad = 0.0;
    for (a, &s) in free.iter().enumerate() {
        lin += grad[s] * d[a];
        let qd: f64 = free
            .iter()
            .enumerate()
            .map(|(b, &t)| ys[s] * ys[t] * k[s * n + t] * d[b])
            .sum();
        quad += d[a] * qd;
    }
    if !(step * lin + 0.5 * step * step * quad < 0.0) {
        return false;
    }
    for (a, &s) in free.iter().enumerate() {
        let mut v = alpha[s] + step * d[a];
        // Land exactly on a bound the step was limited by.
        if v <= 1e-14 * c {
            v = 0.0;
        } else if v >= c * (1.0 - 1e-14) {
            v = c;
        }
        let delta = v - alpha[s];
        alpha[s] = v;
        let w = ys[s] * delta;
        let row = &k[s * n..(s + 1) * n];
        for &t in active {
            grad[t] += ys[t] * row[t] * w;
        }
    }
    true
}

/// Trains on `xs` with labels `ys ∈ {−1, +1}`.
pub fn train(xs: &[[f64; DIM]], ys: &[f64], cfg: &SvmConfig) -> Result<SvmModel> {
    cfg.kernel.validate()?;
    if !(cfg.c > 0.0 && cfg.tol > 0.0) {
        return Err(Error::InvalidParameter("C and tol must be positive".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("{} points but {} labels", xs.len(), ys.len())));
    }
    if ys.iter().any(|y| *y != 1.0 && *y != -1.0) {
        return Err(Error::InvalidParameter("labels must be +1 or -1".into()));
    }
    if !(ys.iter().any(|y| *y > 0.0) && ys.iter().any(|y| *y < 0.0)) {
        return Err(Error::SingleClass);
    }
    let n = xs.len();
    let c = cfg.c;
    let k: Vec<f64> = (0..n * n).map(|ij| kernel(&xs[ij / n], &xs[ij % n], &cfg.kernel)).collect();

    let diag: Vec<f64> = (0..n).map(|t| k[t * n + t]).collect();
    let mut alpha = vec![0.0; n];
    // Gradient of ½αᵀQα − eᵀα.
    let mut grad = vec![-1.0; n];
    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    // Indices still optimised; variables stuck at a bound are shrunk away
    // and their gradients rebuilt before the final optimality check.
    let mut active: Vec<usize> = (0..n).collect();
    let mut shrunk = false;
    let max_iter = cfg.max_passes.saturating_mul(n.max(1));
    let mut gap: f64;
    let mut iter = 0usize;
    loop {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for &t in &active {
            if up(alpha[t], ys[t]) && -ys[t] * grad[t] > gmax {
                gmax = -ys[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for &t in &active {
            if !low(alpha[t], ys[t]) {
                continue;
            }
            let v = -ys[t] * grad[t];
            gmin = gmin.min(v);
            if i == usize::MAX {
                continue;
            }
            let b = gmax - v;
            if b > 0.0 {
                let a = (diag[i] + diag[t] - 2.0 * k[i * n + t]).max(TAU);
                let obj = -b * b / a;
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        gap = gmax - gmin;
        if gap < cfg.tol || j == usize::MAX {
            if !shrunk {
                break;
            }
            rebuild_gradient(&k, ys, &alpha, &mut grad);
            active = (0..n).collect();
            shrunk = false;
            continue;
        }
        if iter == max_iter {
            return Err(Error::IterationLimit(max_iter));
        }
        iter += 1;
        if iter % SHRINK_EVERY == 0 {
            let before = active.len();
            active.retain(|&t| {
                let v = -ys[t] * grad[t];
                match (up(alpha[t], ys[t]), low(alpha[t], ys[t])) {
                    (true, false) => v >= gmin,
                    (false, true) => v <= gmax,
                    _ => true,
                }
            });
            shrunk |= active.len() < before;
        }
        if iter % REFINE_EVERY == 0 && newton_refine(&k, ys, &active, &mut alpha, &mut grad, c) {
            continue;
        }

        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let (yi, yj) = (ys[i], ys[j]);
        let quad = (diag[i] + diag[j] - 2.0 * k[i * n + j]).max(TAU);
        if yi != yj {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        // K is symmetric; rows i and j are contiguous.
        let (wi, wj) = (ys[i] * (alpha[i] - ai_old), ys[j] * (alpha[j] - aj_old));
        let (ki, kj) = (&k[i * n..(i + 1) * n], &k[j * n..(j + 1) * n]);
        for &t in &active {
            grad[t] += ys[t] * (ki[t] * wi + kj[t] * wj);
        }
    }
    log::debug!("smo finished after {iter} iterations");

    // Offset from free vectors, or the midpoint of the feasible interval.
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = ys[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] >= c && ys[t] < 0.0) || (alpha[t] <= 0.0 && ys[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { 0.5 * (ub + lb) };

    let mut model = SvmModel {
        kernel: cfg.kernel,
        c,
        bias: -rho,
        sv: Vec::new(),
        coef: Vec::new(),
        training_accuracy: 0.0,
        kkt_gap: gap,
    };
    for t in 0..n {
        if alpha[t] > 0.0 {
            model.sv.push(xs[t]);
            model.coef.push(alpha[t] * ys[t]);
        }
    }
    model.training_accuracy = model.evaluate(xs, ys).accuracy();
    log::info!(
        "svm: {} support vectors of {n}, training accuracy {:.4}, KKT gap {gap:.2e}",
        model.sv.len(),
        model.training_accuracy
    );
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn kernel_values() {
        let kp = KernelParams::default();
        let z = [0.0; 4];
        assert!((kernel(&z, &z, &kp) - 0.2097152).abs() < 1e-15);
        let y = [0.4, 0.0, 0.0, 0.0];
        let w = [1.0, 0.0, 0.0, 0.0];
        assert!((kernel(&y, &w, &kp) - 1.0).abs() < 1e-15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
            let b: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
            assert_eq!(kernel(&a, &b, &kp), kernel(&b, &a, &kp));
        }
    }

    #[test]
    fn separable_pair() {
        let xs = [[0.1, 0.1, 0.1, 0.1], [2.0, 2.0, 1.5, 1.5]];
        let ys = [1.0, -1.0];
        let m = train(&xs, &ys, &SvmConfig::default()).unwrap();
        assert_eq!(m.training_accuracy, 1.0);
        assert!(m.decision(&xs[0]) > 0.0 && m.decision(&xs[1]) < 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let xs = [[0.1; 4], [0.2; 4]];
        assert!(matches!(
            train(&xs, &[1.0, 1.0], &SvmConfig::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn zero_support_vector_has_zero_gradient() {
        let m = SvmModel {
            kernel: KernelParams::default(),
            c: 100.0,
            bias: 0.3,
            sv: vec![[0.0; 4]],
            coef: vec![2.5],
            training_accuracy: 0.0,
            kkt_gap: 0.0,
        };
        assert_eq!(m.decision_gradient(&[1.0, 2.0, 0.5, 0.1]), [0.0; 4]);
    }

    #[test]
    fn confusion_counts() {
        let c = Confusion {
            true_pos: 3,
            false_pos: 1,
            true_neg: 5,
            false_neg: 1,
        };
        assert_eq!(c.total(), 10);
        assert!((c.accuracy() - 0.8).abs() < 1e-15);
    }
}
