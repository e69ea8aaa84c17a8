//! Fixtures shared by the benchmarks: maps and the states a rollout visits.

use hocbf_core::constraints::ClassKParams;
use hocbf_core::controller::{Obstacle, Scenario};
use hocbf_core::dynamics::SystemState;

/// The training map with four extra obstacles off the straight path, so the
/// QP carries five obstacle rows.
pub fn five_obstacle_map() -> Scenario {
    let mut sc = Scenario::training();
    sc.obstacles
        .extend([(15.0, 40.0), (15.0, 10.0), (40.0, 42.0), (40.0, 8.0)].map(|c| Obstacle { center: c, radius: 4.0 }));
    sc
}

pub fn linear_params() -> ClassKParams {
    ClassKParams::from_vector([1.0, 1.0, 1.0, 1.0]).expect("positive parameters")
}

/// States at which the controller solves a QP along one rollout.
pub fn rollout_states(sc: &Scenario, params: &ClassKParams) -> Vec<SystemState> {
    sc.rollout(params)
        .expect("rollout runs")
        .samples
        .iter()
        .map(|s| s.state)
        .collect()
}
