//! Joint propagation of all vehicles and the intelligent driver model (IDM)
//! that drives the simulated human and the background traffic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Control, JointState, VehicleState};

/// Every IDM output is clamped below at minus this value (m/s²).
pub const HARD_BRAKE: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-positive gap {gap:.3} m between follower and leader")]
    NonPositiveGap { gap: f64 },

    #[error("invalid dynamics configuration: {0}")]
    InvalidConfig(String),
}

/// Constants of one IDM driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration, m/s².
    pub u_max: f64,
    /// Comfortable braking, m/s².
    pub b_pref: f64,
    /// Desired velocity, m/s.
    pub v_des: f64,
    /// Desired time gap, s.
    pub tau_gap: f64,
    /// Jam distance, m.
    pub d_min: f64,
}

impl IdmParams {
    /// Driver used in the lane-advise scenario.
    pub const LANE_ADVISE: IdmParams =
        IdmParams { u_max: 0.73, b_pref: 1.67, v_des: 25.0, tau_gap: 1.5, d_min: 2.0 };

    /// Driver used in the gap-create scenario.
    pub const GAP_CREATE: IdmParams =
        IdmParams { u_max: 0.73, b_pref: 1.67, v_des: 20.0, tau_gap: 1.5, d_min: 2.0 };

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let fields = [self.u_max, self.b_pref, self.v_des, self.tau_gap, self.d_min];
        if fields.iter().all(|f| f.is_finite() && *f > 0.0) {
            Ok(())
        } else {
            Err(DynamicsError::InvalidConfig(format!("IDM constants must be positive: {self:?}")))
        }
    }

    pub fn with_v_des(self, v_des: f64) -> Self {
        Self { v_des, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Simulation step, s.
    pub dt: f64,
    pub robot_accel_bounds: (f64, f64),
    /// Admissible robot accelerations, ascending.
    pub robot_accel_grid: Vec<f64>,
    /// Discretized human action set used for the Boltzmann normalization.
    pub human_accel_grid: Vec<f64>,
    /// Planned robot velocities may not exceed this, m/s.
    pub robot_speed_limit: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            robot_accel_bounds: (-3.0, 2.0),
            robot_accel_grid: uniform_grid(-3.0, 2.0, 11),
            human_accel_grid: uniform_grid(-3.0, 2.0, 11),
            robot_speed_limit: 30.0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidConfig(m.to_string()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        let (lo, hi) = self.robot_accel_bounds;
        if !(lo <= 0.0 && hi >= 0.0) {
            return bad("robot acceleration bounds must bracket zero");
        }
        for (name, grid) in
            [("robot_accel_grid", &self.robot_accel_grid), ("human_accel_grid", &self.human_accel_grid)]
        {
            if grid.is_empty() {
                return bad(&format!("{name} is empty"));
            }
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return bad(&format!("{name} must be strictly increasing"));
            }
            if !grid.contains(&0.0) {
                return bad(&format!("{name} must contain 0"));
            }
        }
        if self.robot_accel_grid.iter().any(|&a| a < lo || a > hi) {
            return bad("robot_accel_grid exceeds robot_accel_bounds");
        }
        if !(self.robot_speed_limit > 0.0) {
            return bad("robot_speed_limit must be positive");
        }
        Ok(())
    }
}

/// `n` evenly spaced values from `lo` to `hi` inclusive. Values within 1e-12
/// of zero are snapped to exactly zero.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let v = lo + step * i as f64;
            if v.abs() < 1e-12 {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Explicit Euler step of a single vehicle. Position uses the pre-update
/// velocity; velocity saturates at zero.
pub fn step_vehicle(vehicle: &VehicleState, control: &Control, dt: f64) -> VehicleState {
    VehicleState {
        x: vehicle.x + vehicle.v * dt,
        v: (vehicle.v + control.accel * dt).max(0.0),
        lane: control.lane_change.unwrap_or(vehicle.lane),
    }
}

/// Advances every vehicle by `dt`. Background vehicle `i` uses
/// `background_accels[i]`; missing entries coast.
pub fn joint_step(
    state: &JointState,
    robot_u: &Control,
    human_u: &Control,
    background_accels: &[f64],
    dt: f64,
) -> JointState {
    let background = state
        .background
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let a = background_accels.get(i).copied().unwrap_or(0.0);
            step_vehicle(b, &Control::accel(a), dt)
        })
        .collect();
    JointState {
        robot: step_vehicle(&state.robot, robot_u, dt),
        human: step_vehicle(&state.human, human_u, dt),
        background,
        time: state.time + dt,
    }
}

/// IDM desired gap for a follower at `v` behind a leader at `v_lead`,
/// floored at zero.
pub fn idm_desired_gap(v: f64, v_lead: f64, params: &IdmParams) -> f64 {
    let approach = v * (v - v_lead) / (2.0 * (params.u_max * params.b_pref).sqrt());
    (params.d_min + params.tau_gap * v + approach).max(0.0)
}

/// IDM acceleration of `follower`. Without a leader the gap is infinite.
pub fn idm_accel(
    follower: &VehicleState,
    leader: Option<&VehicleState>,
    params: &IdmParams,
) -> Result<f64, DynamicsError> {
    let free = 1.0 - (follower.v / params.v_des).powi(4);
    let interaction = match leader {
        None => 0.0,
        Some(leader) => {
            let gap = leader.x - follower.x;
            if gap <= 0.0 {
                return Err(DynamicsError::NonPositiveGap { gap });
            }
            (idm_desired_gap(follower.v, leader.v, params) / gap).powi(2)
        }
    };
    Ok((params.u_max * (free - interaction)).clamp(-HARD_BRAKE, params.u_max))
}

/// A stationary obstacle terminating a lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneEnd {
    pub lane: u8,
    pub x: f64,
}

/// Static road features that act as leaders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub lane_end: Option<LaneEnd>,
}

/// Identity of a road user in a [`JointState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Agent {
    Robot,
    Human,
    Background(usize),
    LaneEnd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub agent: Agent,
    pub state: VehicleState,
}

impl Neighbor {
    /// Longitudinal distance from `x` to this neighbor (positive if ahead).
    pub fn gap_from(&self, x: f64) -> f64 {
        self.state.x - x
    }
}

pub fn agent_state(state: &JointState, agent: Agent) -> Option<VehicleState> {
    match agent {
        Agent::Robot => Some(state.robot),
        Agent::Human => Some(state.human),
        Agent::Background(i) => state.background.get(i).copied(),
        Agent::LaneEnd => None,
    }
}

fn occupants<'a>(state: &'a JointState) -> impl Iterator<Item = (Agent, VehicleState)> + 'a {
    [(Agent::Robot, state.robot), (Agent::Human, state.human)]
        .into_iter()
        .chain(state.background.iter().enumerate().map(|(i, b)| (Agent::Background(i), *b)))
}

/// Nearest road user at or ahead of `agent` in `lane` (which may differ from
/// the agent's own lane when evaluating a lane change). Vehicles level with
/// the agent count as leaders so that overlaps surface as collisions.
pub fn leader_in_lane(state: &JointState, road: &Road, agent: Agent, lane: u8) -> Option<Neighbor> {
    let me = agent_state(state, agent)?;
    let mut best: Option<Neighbor> = None;
    for (other, s) in occupants(state) {
        if other == agent || s.lane != lane || s.x < me.x {
            continue;
        }
        if best.is_none_or(|b| s.x < b.state.x) {
            best = Some(Neighbor { agent: other, state: s });
        }
    }
    if let Some(end) = road.lane_end {
        if end.lane == lane && end.x >= me.x && best.is_none_or(|b| end.x < b.state.x) {
            best = Some(Neighbor {
                agent: Agent::LaneEnd,
                state: VehicleState::new(end.x, 0.0, lane),
            });
        }
    }
    best
}

/// Nearest vehicle strictly behind `agent` in `lane`.
pub fn follower_in_lane(state: &JointState, agent: Agent, lane: u8) -> Option<Neighbor> {
    let me = agent_state(state, agent)?;
    let mut best: Option<Neighbor> = None;
    for (other, s) in occupants(state) {
        if other == agent || s.lane != lane || s.x >= me.x {
            continue;
        }
        if best.is_none_or(|b| s.x > b.state.x) {
            best = Some(Neighbor { agent: other, state: s });
        }
    }
    best
}

/// IDM acceleration of `agent` behind its current-lane leader.
pub fn agent_idm_accel(
    state: &JointState,
    road: &Road,
    agent: Agent,
    params: &IdmParams,
) -> Result<f64, DynamicsError> {
    let me = agent_state(state, agent).expect("agent present");
    let leader = leader_in_lane(state, road, agent, me.lane);
    idm_accel(&me, leader.as_ref().map(|n| &n.state), params)
}

/// IDM accelerations of all background vehicles, in background order.
pub fn background_idm_accels(
    state: &JointState,
    road: &Road,
    params: &[IdmParams],
) -> Result<Vec<f64>, DynamicsError> {
    (0..state.background.len())
        .map(|i| agent_idm_accel(state, road, Agent::Background(i), &params[i]))
        .collect()
}
