//! HOCBF and CLF constraint rows for a single QP time step.
//!
//! The class-K functions of the ψ-chain are penalised power functions
//! `α_i(z) = p_i · sign(z)|z|^{q_i}`. Every builder returns a
//! [`LinearConstraint`] over the decision vector `(u1, u2, δ1, δ2)`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, SystemState};
use crate::error::{Error, Result};

/// Number of QP decision variables: two controls followed by two CLF relaxations.
pub const DECISION_DIM: usize = 4;
pub const U1: usize = 0;
pub const U2: usize = 1;
pub const DELTA1: usize = 2;
pub const DELTA2: usize = 3;

/// Closer than this to an obstacle center the distance gradient is treated as undefined.
pub const MIN_CENTER_DISTANCE: f64 = 1e-6;

/// `sign(z)·|z|^q`, the odd extension of `z^q`.
pub fn signed_power(z: f64, q: f64) -> f64 {
    if z == 0.0 {
        0.0
    } else {
        z.signum() * z.abs().powf(q)
    }
}

/// Derivative of [`signed_power`]: `q·|z|^{q-1}`, with `|z|` floored so that
/// fractional powers stay finite at the origin.
pub fn signed_power_derivative(z: f64, q: f64) -> f64 {
    if q == 1.0 {
        return 1.0;
    }
    q * z.abs().max(1e-12).powf(q - 1.0)
}

/// Penalties `p` and powers `q` of the class-K functions, one pair per ψ level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ClassKParams {
    p: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl TryFrom<RawParams> for ClassKParams {
    type Error = Error;
    fn try_from(r: RawParams) -> Result<Self> {
        ClassKParams::new(r.p, r.q)
    }
}

impl From<ClassKParams> for RawParams {
    fn from(c: ClassKParams) -> Self {
        RawParams { p: c.p, q: c.q }
    }
}

impl ClassKParams {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.len() != q.len() || p.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "penalty/power vectors must be non-empty and of equal length (got {} and {})",
                p.len(),
                q.len()
            )));
        }
        if let Some(bad) = p.iter().chain(&q).find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "class-K penalties and powers must be finite and > 0, got {bad}"
            )));
        }
        Ok(Self { p, q })
    }

    /// Relative-degree-2 parameters in learning order `(p1, p2, q1, q2)`.
    pub fn from_vector(v: [f64; 4]) -> Result<Self> {
        Self::new(vec![v[0], v[1]], vec![v[2], v[3]])
    }

    /// Identity class-K functions (`p = q = 1`).
    pub fn linear(m: usize) -> Self {
        Self {
            p: vec![1.0; m],
            q: vec![1.0; m],
        }
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn relative_degree(&self) -> usize {
        self.p.len()
    }

    /// `(p1, p2, q1, q2)`; panics unless the relative degree is 2.
    pub fn to_vector(&self) -> [f64; 4] {
        assert_eq!(self.relative_degree(), 2, "parameter vector is defined for m = 2");
        [self.p[0], self.p[1], self.q[0], self.q[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    /// `coeffs · z + constant ≥ 0`
    Geq,
    /// `coeffs · z + constant ≤ 0`
    Leq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintTag {
    Hocbf(usize),
    Clf(usize),
    Bound,
    /// Linearised classifier hypersurface in parameter space.
    Hypersurface,
}

/// One row of a QP/LP constraint matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub coeffs: Vec<f64>,
    pub constant: f64,
    pub sense: Sense,
    pub tag: ConstraintTag,
}

impl LinearConstraint {
    pub fn geq(coeffs: Vec<f64>, constant: f64, tag: ConstraintTag) -> Self {
        Self {
            coeffs,
            constant,
            sense: Sense::Geq,
            tag,
        }
    }

    pub fn leq(coeffs: Vec<f64>, constant: f64, tag: ConstraintTag) -> Self {
        Self {
            coeffs,
            constant,
            sense: Sense::Leq,
            tag,
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.coeffs.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.constant
    }

    /// Signed distance to violation: non-negative iff the row holds at `z`.
    pub fn slack(&self, z: &[f64]) -> f64 {
        match self.sense {
            Sense::Geq => self.value(z),
            Sense::Leq => -self.value(z),
        }
    }

    /// The row rewritten as `a · z + c ≥ 0`.
    pub fn as_geq(&self) -> (Vec<f64>, f64) {
        match self.sense {
            Sense::Geq => (self.coeffs.clone(), self.constant),
            Sense::Leq => (self.coeffs.iter().map(|c| -c).collect(), -self.constant),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.constant.is_finite() && self.coeffs.iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Barrier {
    /// `b = ‖(x, y) − center‖ − radius`, relative degree 2.
    Circle { center: (f64, f64), radius: f64 },
    /// `b = v_max − v`, relative degree 1.
    SpeedMax { v_max: f64 },
    /// `b = v − v_min`, relative degree 1.
    SpeedMin { v_min: f64 },
}

impl Barrier {
    pub fn relative_degree(&self) -> usize {
        match self {
            Barrier::Circle { .. } => 2,
            Barrier::SpeedMax { .. } | Barrier::SpeedMin { .. } => 1,
        }
    }

    pub fn value(&self, s: &SystemState) -> f64 {
        match *self {
            Barrier::Circle { center, radius } => (s.x - center.0).hypot(s.y - center.1) - radius,
            Barrier::SpeedMax { v_max } => v_max - s.v,
            Barrier::SpeedMin { v_min } => s.v - v_min,
        }
    }

    /// Closed-form Lie derivatives along the unicycle.
    pub fn lie(&self, s: &SystemState) -> Result<LieDerivatives> {
        match *self {
            Barrier::Circle { center, radius } => {
                let dx = s.x - center.0;
                let dy = s.y - center.1;
                let d = dx.hypot(dy);
                if d < MIN_CENTER_DISTANCE {
                    return Err(Error::SingularBarrier { distance: d });
                }
                let (sin, cos) = s.theta.sin_cos();
                let radial = dx * cos + dy * sin;
                let lateral = dy * cos - dx * sin;
                let lf = s.v * radial / d;
                let lf2 = s.v * s.v / d - (s.v * radial).powi(2) / (d * d * d);
                Ok(LieDerivatives {
                    b: d - radius,
                    lf: vec![lf, lf2],
                    lg: [s.v * lateral / d, radial / d],
                })
            }
            Barrier::SpeedMax { v_max } => Ok(LieDerivatives {
                b: v_max - s.v,
                lf: vec![0.0],
                lg: [0.0, -1.0],
            }),
            Barrier::SpeedMin { v_min } => Ok(LieDerivatives {
                b: s.v - v_min,
                lf: vec![0.0],
                lg: [0.0, 1.0],
            }),
        }
    }
}

/// `b`, `L_f^k b` for `k = 1..=m`, and `L_g L_f^{m-1} b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LieDerivatives {
    pub b: f64,
    pub lf: Vec<f64>,
    pub lg: [f64; 2],
}

/// Values of the ψ-chain at one state plus the affine form of the final inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiChain {
    /// `ψ_0 .. ψ_{m-1}`.
    pub psi: Vec<f64>,
    /// `ψ_m = constant + control · u`.
    pub constant: f64,
    pub control: [f64; 2],
}

/// A high-order CBF with penalised power class-K functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HocbfSpec {
    pub id: usize,
    pub barrier: Barrier,
    pub params: ClassKParams,
}

impl HocbfSpec {
    pub fn new(id: usize, barrier: Barrier, params: ClassKParams) -> Result<Self> {
        if params.relative_degree() != barrier.relative_degree() {
            return Err(Error::InvalidParameter(format!(
                "barrier has relative degree {} but {} class-K pairs were given",
                barrier.relative_degree(),
                params.relative_degree()
            )));
        }
        Ok(Self { id, barrier, params })
    }

    pub fn relative_degree(&self) -> usize {
        self.barrier.relative_degree()
    }

    pub fn barrier_value(&self, s: &SystemState) -> f64 {
        self.barrier.value(s)
    }

    pub fn chain(&self, s: &SystemState) -> Result<PsiChain> {
        let lie = self.barrier.lie(s)?;
        let (p, q) = (self.params.p(), self.params.q());
        let b = lie.b;
        match self.relative_degree() {
            1 => Ok(PsiChain {
                psi: vec![b],
                constant: lie.lf[0] + p[0] * signed_power(b, q[0]),
                control: lie.lg,
            }),
            2 => {
                let bdot = lie.lf[0];
                let psi1 = bdot + p[0] * signed_power(b, q[0]);
                let constant = lie.lf[1] + p[0] * signed_power_derivative(b, q[0]) * bdot + p[1] * signed_power(psi1, q[1]);
                Ok(PsiChain {
                    psi: vec![b, psi1],
                    constant,
                    control: lie.lg,
                })
            }
            m => Err(Error::InvalidParameter(format!("relative degree {m} is not supported"))),
        }
    }

    /// `ψ_m(x, u) ≥ 0` as a row over `(u1, u2, δ1, δ2)`.
    pub fn constraint(&self, s: &SystemState) -> Result<LinearConstraint> {
        let chain = self.chain(s)?;
        let mut coeffs = vec![0.0; DECISION_DIM];
        coeffs[U1] = chain.control[0];
        coeffs[U2] = chain.control[1];
        let row = LinearConstraint::geq(coeffs, chain.constant, ConstraintTag::Hocbf(self.id));
        if !row.is_finite() {
            return Err(Error::non_finite("HOCBF row", &row));
        }
        Ok(row)
    }
}

/// HOCBF for a circular keep-out region of safe radius `r`.
pub fn circular_obstacle_hocbf(id: usize, center: (f64, f64), r: f64, params: ClassKParams) -> Result<HocbfSpec> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("safe radius must be positive, got {r}")));
    }
    HocbfSpec::new(id, Barrier::Circle { center, radius: r }, params)
}

/// Upper and lower speed-limit CBFs with identity class-K functions.
pub fn speed_limit_cbfs(first_id: usize, v_min: f64, v_max: f64) -> Result<[HocbfSpec; 2]> {
    if !(v_min < v_max) {
        return Err(Error::InvalidParameter(format!(
            "need v_min < v_max, got {v_min} and {v_max}"
        )));
    }
    Ok([
        HocbfSpec::new(first_id, Barrier::SpeedMax { v_max }, ClassKParams::linear(1))?,
        HocbfSpec::new(first_id + 1, Barrier::SpeedMin { v_min }, ClassKParams::linear(1))?,
    ])
}

/// `true` iff every `ψ_i(x0) ≥ 0`, `i < m`, for every spec.
pub fn initial_condition_check(specs: &[HocbfSpec], state: &SystemState) -> bool {
    specs.iter().all(|spec| {
        if spec.barrier_value(state) < 0.0 {
            return false;
        }
        match spec.chain(state) {
            Ok(chain) => chain.psi.iter().all(|v| *v >= 0.0),
            Err(_) => false,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClfTarget {
    /// `V = (θ − θ_d)²` with `θ_d` the bearing to `goal`.
    Heading { goal: (f64, f64) },
    /// `V = (v − v0)²`.
    Speed { v0: f64 },
}

/// Relaxed exponential CLF: `V̇ + ε V ≤ δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfSpec {
    pub id: usize,
    pub target: ClfTarget,
    pub rate: f64,
    pub penalty: f64,
    /// Index of this CLF's relaxation variable in the decision vector.
    pub relax_index: usize,
}

impl ClfSpec {
    /// Lyapunov value and the error it squares.
    pub fn error(&self, s: &SystemState) -> Option<f64> {
        match self.target {
            ClfTarget::Heading { goal } => {
                let (gx, gy) = (goal.0 - s.x, goal.1 - s.y);
                if gx.hypot(gy) < 1e-9 {
                    return None;
                }
                Some(wrap_angle(s.theta - gy.atan2(gx)))
            }
            ClfTarget::Speed { v0 } => Some(s.v - v0),
        }
    }

    pub fn value(&self, s: &SystemState) -> f64 {
        self.error(s).map_or(0.0, |e| e * e)
    }

    pub fn constraint(&self, s: &SystemState) -> LinearConstraint {
        let mut coeffs = vec![0.0; DECISION_DIM];
        let Some(e) = self.error(s) else {
            return LinearConstraint::leq(coeffs, 0.0, ConstraintTag::Clf(self.id));
        };
        let control = match self.target {
            ClfTarget::Heading { .. } => U1,
            ClfTarget::Speed { .. } => U2,
        };
        coeffs[control] = 2.0 * e;
        coeffs[self.relax_index] = -1.0;
        LinearConstraint::leq(coeffs, self.rate * e * e, ConstraintTag::Clf(self.id))
    }
}

/// Heading and speed CLFs that steer the robot toward `goal` at speed `v0`.
pub fn goal_clfs(goal: (f64, f64), v0: f64, rate: f64, penalty: f64) -> Result<[ClfSpec; 2]> {
    if !(rate >= 0.0 && penalty > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "CLF rate must be >= 0 and penalty > 0, got {rate} and {penalty}"
        )));
    }
    Ok([
        ClfSpec {
            id: 0,
            target: ClfTarget::Heading { goal },
            rate,
            penalty,
            relax_index: DELTA1,
        },
        ClfSpec {
            id: 1,
            target: ClfTarget::Speed { v0 },
            rate,
            penalty,
            relax_index: DELTA2,
        },
    ])
}
