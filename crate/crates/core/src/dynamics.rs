//! Control-affine robot models and fixed-step integration.
//!
//! Controls are held constant over each interval of length `dt`; the state is
//! advanced with a classical fourth-order Runge-Kutta step (or a single
//! forward-Euler step when [`Integrator::Euler`] is selected).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unicycle state: planar position, heading and forward speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl SystemState {
    pub const fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.theta, self.v]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Turning rate `u1` (rad/s) and acceleration `u2` (m/s²).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub u1: f64,
    pub u2: f64,
}

impl ControlInput {
    pub const fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn is_finite(&self) -> bool {
        self.u1.is_finite() && self.u2.is_finite()
    }
}

pub const STATE_DIM: usize = 4;
pub const CONTROL_DIM: usize = 2;

pub type Drift = fn(&SystemState) -> [f64; STATE_DIM];
pub type Actuation = fn(&SystemState) -> [[f64; CONTROL_DIM]; STATE_DIM];

/// `ẋ = f(x) + g(x) u`.
#[derive(Clone, Copy)]
pub struct AffineModel {
    pub drift: Drift,
    pub actuation: Actuation,
}

impl std::fmt::Debug for AffineModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AffineModel")
            .field("state_dim", &STATE_DIM)
            .field("control_dim", &CONTROL_DIM)
            .finish()
    }
}

impl AffineModel {
    pub const fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub const fn control_dim(&self) -> usize {
        CONTROL_DIM
    }

    /// Evaluates `f(x) + g(x) u`.
    pub fn derivative(&self, state: &SystemState, u: ControlInput) -> [f64; STATE_DIM] {
        let f = (self.drift)(state);
        let g = (self.actuation)(state);
        let mut out = f;
        for (o, row) in out.iter_mut().zip(g.iter()) {
            *o += row[0] * u.u1 + row[1] * u.u2;
        }
        out
    }
}

fn unicycle_drift(s: &SystemState) -> [f64; STATE_DIM] {
    let (sin, cos) = s.theta.sin_cos();
    [s.v * cos, s.v * sin, 0.0, 0.0]
}

fn unicycle_actuation(_: &SystemState) -> [[f64; CONTROL_DIM]; STATE_DIM] {
    [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
}

/// Unicycle with turning-rate and acceleration inputs.
pub fn unicycle() -> AffineModel {
    AffineModel {
        drift: unicycle_drift,
        actuation: unicycle_actuation,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Advances `state` by `dt` under constant `u` using RK4.
pub fn step(model: &AffineModel, state: SystemState, u: ControlInput, dt: f64) -> Result<SystemState> {
    step_with(model, Integrator::Rk4, state, u, dt)
}

pub fn step_with(
    model: &AffineModel,
    integrator: Integrator,
    state: SystemState,
    u: ControlInput,
    dt: f64,
) -> Result<SystemState> {
    if !state.is_finite() {
        return Err(Error::non_finite("state", state));
    }
    if !u.is_finite() {
        return Err(Error::non_finite("control", u));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let x0 = state.to_array();
    let next = match integrator {
        Integrator::Euler => {
            let k = model.derivative(&state, u);
            axpy(&x0, dt, &k)
        }
        Integrator::Rk4 => {
            let k1 = model.derivative(&state, u);
            let k2 = model.derivative(&SystemState::from_array(axpy(&x0, 0.5 * dt, &k1)), u);
            let k3 = model.derivative(&SystemState::from_array(axpy(&x0, 0.5 * dt, &k2)), u);
            let k4 = model.derivative(&SystemState::from_array(axpy(&x0, dt, &k3)), u);
            let mut out = x0;
            for i in 0..STATE_DIM {
                out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            out
        }
    };
    let mut next = SystemState::from_array(next);
    next.theta = wrap_angle(next.theta);
    if !next.is_finite() {
        return Err(Error::non_finite("integrated state", next));
    }
    Ok(next)
}

fn axpy(x: &[f64; STATE_DIM], a: f64, k: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
    let mut out = *x;
    for (o, ki) in out.iter_mut().zip(k) {
        *o += a * ki;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn close(a: SystemState, b: SystemState) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn straight_line() {
        let s = step(
            &unicycle(),
            SystemState::new(0.0, 0.0, 0.0, 1.0),
            ControlInput::default(),
            0.1,
        )
        .unwrap();
        close(s, SystemState::new(0.1, 0.0, 0.0, 1.0));
    }

    #[test]
    fn pure_rotation() {
        let s = step(
            &unicycle(),
            SystemState::new(0.0, 0.0, 0.0, 0.0),
            ControlInput::new(0.2, 0.0),
            0.1,
        )
        .unwrap();
        close(s, SystemState::new(0.0, 0.0, 0.02, 0.0));
    }

    #[test]
    fn motion_along_y() {
        let s = step(
            &unicycle(),
            SystemState::new(0.0, 0.0, PI / 2.0, 2.0),
            ControlInput::default(),
            0.1,
        )
        .unwrap();
        close(s, SystemState::new(0.0, 0.2, PI / 2.0, 2.0));
    }

    #[test]
    fn drift_and_actuation() {
        let m = unicycle();
        let d = (m.drift)(&SystemState::new(0.0, 0.0, 0.0, 2.0));
        assert_eq!(d, [2.0, 0.0, 0.0, 0.0]);
        let d = (m.drift)(&SystemState::new(0.0, 0.0, PI, 2.0));
        assert_abs_diff_eq!(d[0], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-15);
        let s = SystemState::new(3.0, -1.0, 0.7, 1.3);
        let f = (m.drift)(&s);
        let full = m.derivative(&s, ControlInput::new(0.2, 0.5));
        let gu: Vec<f64> = full.iter().zip(f).map(|(a, b)| a - b).collect();
        assert_eq!(gu, vec![0.0, 0.0, 0.2, 0.5]);
    }

    #[test]
    fn zero_control_zero_speed_is_fixed_point() {
        let s0 = SystemState::new(1.25, -3.5, 0.3, 0.0);
        assert_eq!(step(&unicycle(), s0, ControlInput::default(), 0.1).unwrap(), s0);
    }

    #[test]
    fn rejects_non_finite() {
        let m = unicycle();
        assert!(step(&m, SystemState::new(f64::NAN, 0.0, 0.0, 0.0), ControlInput::default(), 0.1).is_err());
        assert!(step(
            &m,
            SystemState::new(0.0, 0.0, 0.0, 0.0),
            ControlInput::new(f64::INFINITY, 0.0),
            0.1
        )
        .is_err());
        assert!(step(&m, SystemState::new(0.0, 0.0, 0.0, 0.0), ControlInput::default(), 0.0).is_err());
    }

    #[test]
    fn euler_switch() {
        let s = step_with(
            &unicycle(),
            Integrator::Euler,
            SystemState::new(0.0, 0.0, 0.0, 1.0),
            ControlInput::new(0.0, 0.5),
            0.1,
        )
        .unwrap();
        // Euler ignores the acceleration's effect on position within the step.
        close(s, SystemState::new(0.1, 0.0, 0.0, 1.05));
    }

    #[test]
    fn wrap_boundaries() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(2.0 * PI + 0.1), 0.1, epsilon = 1e-12);
    }

    /// RK4 at dt/64 is the reference: its error is ~64⁴ times below a single step's.
    fn reference(s: SystemState, u: ControlInput, dt: f64) -> SystemState {
        let mut out = s;
        for _ in 0..64 {
            out = step(&unicycle(), out, u, dt / 64.0).unwrap();
        }
        out
    }

    fn err(a: SystemState, b: SystemState) -> f64 {
        let d = wrap_angle(a.theta - b.theta);
        ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + d * d + (a.v - b.v).powi(2)).sqrt()
    }

    #[test]
    fn fourth_order_convergence() {
        let s = SystemState::new(1.0, 2.0, 0.4, 1.5);
        let u = ControlInput::new(0.8, -0.4);
        let dt = 0.4;
        let e1 = err(step(&unicycle(), s, u, dt).unwrap(), reference(s, u, dt));
        let e2 = err(step(&unicycle(), s, u, dt / 2.0).unwrap(), reference(s, u, dt / 2.0));
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    }

    proptest! {
        #[test]
        fn heading_stays_wrapped(theta in -PI..PI, u1 in -50.0f64..50.0, v in 0.0f64..2.0) {
            let s = step(&unicycle(), SystemState::new(0.0, 0.0, theta, v), ControlInput::new(u1, 0.0), 0.1).unwrap();
            prop_assert!(s.theta.abs() <= PI);
            prop_assert!(s.theta > -PI);
        }

        #[test]
        fn drift_is_lipschitz_on_box(
            x in -50.0f64..50.0, y in -50.0f64..50.0, th in -PI..PI, v in 0.0f64..2.0,
            dth in -1e-3f64..1e-3, dv in -1e-3f64..1e-3,
        ) {
            let m = unicycle();
            let a = (m.drift)(&SystemState::new(x, y, th, v));
            let b = (m.drift)(&SystemState::new(x, y, th + dth, v + dv));
            let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            // |∂f/∂(θ,v)| ≤ max(v, 1) ≤ 2 on this box.
            prop_assert!(diff <= 2.0 * (dth.abs() + dv.abs()) + 1e-12);
        }
    }
}
