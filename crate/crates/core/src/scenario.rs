//! Episode orchestration: the observe/probe schedule, the passive baseline,
//! influence through atomic objectives, lane-change decisions and metrics.
//!
//! Lane 0 is the inner lane and lane 1 the outer lane. The robot and the
//! human start in the outer lane with the human behind.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    agent_idm_accel, agent_state, follower_in_lane, idm_accel, idm_desired_gap, joint_step, leader_in_lane,
    Agent, DynamicsConfig, DynamicsError, IdmParams, LaneEnd, Road,
};
use crate::inference::{
    belief_update, estimate_phi, EstimateMode, HumanUtilityModel, InferenceError, SpeedReference,
};
use crate::model::{Belief, Control, HypothesisGrid, JointState, VehicleState, INNER_LANE, OUTER_LANE};
use crate::planning::{influence_plan, probe_plan, Objective, PlanError, PlanResult, PlannerConfig, PredictionModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Probe the human's desired velocity, then coax a fast driver into the
    /// widest gap of the inner lane.
    LaneAdvise,
    /// Probe the human's desired headway, then open a merge gap for it
    /// before its lane ends.
    GapCreate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Active,
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Observe,
    Probe,
    Influence,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Observe => "observe",
            Phase::Probe => "probe",
            Phase::Influence => "influence",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Robot,
    Human,
    Background,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 3] = [VehicleClass::Robot, VehicleClass::Human, VehicleClass::Background];
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),

    #[error("collision at t = {time:.1} s between {first} and {second}")]
    Collision { time: f64, first: String, second: String, partial: Box<RunLog> },

    #[error("no background vehicle in the inner lane")]
    NoBackgroundVehicles,

    #[error("estimated desired velocity {phi_hat:.2} m/s is below the cutoff {cutoff:.2} m/s")]
    CutoffNotMet { phi_hat: f64, cutoff: f64 },

    #[error(transparent)]
    Plan(#[from] PlanError),

    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundVehicle {
    pub x: f64,
    pub v: f64,
    pub lane: u8,
    pub idm: IdmParams,
}

/// Timing of the information-gathering phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub observe_secs: f64,
    pub probe_secs: f64,
    /// Receding-horizon replanning period, s.
    pub replan_secs: f64,
    /// Probing stops once the expected information of the best plan drops
    /// below this many nats.
    pub termination_information: f64,
    /// A passive robot also runs the stopping test, without acting on the
    /// plans, and influences with its passive estimate once it passes.
    pub passive_influence: bool,
    /// Speed range probing plans keep the robot in, m/s.
    pub probe_min_speed: f64,
    pub probe_max_speed: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            observe_secs: 5.0,
            probe_secs: 5.0,
            replan_secs: 1.0,
            termination_information: 5e-3,
            passive_influence: false,
            probe_min_speed: 0.0,
            probe_max_speed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceSettings {
    /// How far below the human's speed the robot slows when blocking, m/s.
    pub block_margin: f64,
    /// The human counts as aligned with a gap within this distance, m.
    pub align_tolerance: f64,
    /// Added to the estimated headway to size the merge gap, m.
    pub gap_margin: f64,
    /// Length scale of position-tracking rewards, m.
    pub position_scale: f64,
    /// The robot opens the merge gap with this much room behind the human, m.
    pub behind_margin: f64,
    /// Time over which the robot spreads the slowdown that opens the gap, s.
    pub open_secs: f64,
}

impl Default for InfluenceSettings {
    fn default() -> Self {
        Self {
            block_margin: 2.0,
            align_tolerance: 10.0,
            gap_margin: 2.0,
            position_scale: 10.0,
            behind_margin: 10.0,
            open_secs: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub mode: Mode,
    pub duration: f64,
    pub rng_seed: u64,
    /// Minimum estimated desired velocity that triggers lane advice, m/s.
    pub cutoff_velocity: f64,
    pub robot_initial: VehicleState,
    pub human_initial: VehicleState,
    /// Ground-truth behavior of the human.
    pub human_idm: IdmParams,
    /// Car-following law of the robot once it has nothing left to do, also
    /// used to judge its own lane change.
    pub robot_idm: IdmParams,
    pub background: Vec<BackgroundVehicle>,
    pub road: Road,
    pub dynamics: DynamicsConfig,
    pub model: HumanUtilityModel,
    pub planner: PlannerConfig,
    pub schedule: Schedule,
    pub influence: InfluenceSettings,
    /// Belief snapshot period, s.
    pub snapshot_every: f64,
    /// Also snapshot the belief at every step.
    pub record_all_beliefs: bool,
}

fn default_model(grid: HypothesisGrid, rationality_beta: f64) -> HumanUtilityModel {
    let mut model = HumanUtilityModel::new(grid);
    model.rationality_beta = rationality_beta;
    model.lookahead = 8.0;
    model.lookahead_substeps = 8;
    model
}

fn default_dynamics() -> DynamicsConfig {
    DynamicsConfig {
        robot_accel_grid: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
        // Fine near zero, where car-following accelerations live.
        human_accel_grid: vec![
            -3.0, -2.0, -1.5, -1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0,
        ],
        ..DynamicsConfig::default()
    }
}

impl ScenarioConfig {
    /// Car-following scenario with four inner-lane vehicles that overtake
    /// the robot and the human.
    pub fn lane_advise(mode: Mode) -> Self {
        let traffic = IdmParams::LANE_ADVISE;
        let background = [-200.0, -250.0, -330.0, -390.0]
            .iter()
            .map(|&x| BackgroundVehicle { x, v: 20.0, lane: INNER_LANE, idm: traffic })
            .collect();
        let dynamics = default_dynamics();
        Self {
            kind: ScenarioKind::LaneAdvise,
            mode,
            duration: 120.0,
            rng_seed: 0,
            cutoff_velocity: 23.0,
            robot_initial: VehicleState::new(0.0, 20.0, OUTER_LANE),
            human_initial: VehicleState::new(-100.0, 20.0, OUTER_LANE),
            human_idm: IdmParams::LANE_ADVISE,
            robot_idm: IdmParams { tau_gap: 0.5, v_des: 20.0, ..IdmParams::LANE_ADVISE },
            background,
            road: Road::default(),
            planner: PlannerConfig {
                evidence_repeats: 1.0 / dynamics.dt,
                ..PlannerConfig::default()
            },
            dynamics,
            model: default_model(HypothesisGrid::lane_advise_velocity(), 0.05),
            schedule: Schedule::default(),
            influence: InfluenceSettings::default(),
            snapshot_every: 10.0,
            record_all_beliefs: false,
        }
    }

    /// Merge scenario: the outer lane ends and the inner lane carries a
    /// dense platoon whose gaps are too short for the human.
    pub fn gap_create(mode: Mode) -> Self {
        let mut config = Self::lane_advise(mode);
        config.kind = ScenarioKind::GapCreate;
        config.human_idm = IdmParams::GAP_CREATE;
        // Platoon leader cruises at 20 m/s; followers sit at the spacing where
        // their IDM acceleration is exactly zero at 20 m/s.
        let leader = IdmParams::GAP_CREATE;
        let follower = IdmParams { v_des: 25.0, tau_gap: 1.0, ..IdmParams::GAP_CREATE };
        let spacing = platoon_spacing(20.0, &follower);
        config.background = (0..16)
            .map(|i| BackgroundVehicle {
                x: 160.0 - spacing * i as f64,
                v: 20.0,
                lane: INNER_LANE,
                idm: if i == 0 { leader } else { follower },
            })
            .collect();
        config.road = Road { lane_end: Some(LaneEnd { lane: OUTER_LANE, x: 2000.0 }) };
        // Headway shows only weakly in the human's accelerations, so the model
        // is less sharp than for desired speed.
        config.model = default_model(HypothesisGrid::gap_create_headway(), 0.01);
        config.model.reference_velocity = 20.0;
        config.model.speed_reference = SpeedReference::Leader;
        // Headway is probed below the reference velocity.
        config.schedule.probe_max_speed = Some(config.model.reference_velocity);
        config.schedule.probe_min_speed = config.model.reference_velocity - 5.0;
        config.schedule.passive_influence = true;
        config
    }

    pub fn preset(kind: ScenarioKind, mode: Mode) -> Self {
        match kind {
            ScenarioKind::LaneAdvise => Self::lane_advise(mode),
            ScenarioKind::GapCreate => Self::gap_create(mode),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        self.dynamics.validate().map_err(|e| ScenarioError::InvalidConfig(e.to_string()))?;
        self.model.validate().map_err(ScenarioError::InvalidConfig)?;
        self.planner.validate(&self.dynamics).map_err(ScenarioError::InvalidConfig)?;
        self.probe_planner().validate(&self.dynamics)
            .map_err(ScenarioError::InvalidConfig)?;
        for p in [self.human_idm, self.robot_idm].iter().chain(self.background.iter().map(|b| &b.idm)) {
            p.validate().map_err(|e| ScenarioError::InvalidConfig(e.to_string()))?;
        }
        if !(self.duration.is_finite() && self.duration >= self.dynamics.dt) {
            return bad("duration must be at least one time step");
        }
        if self.human_initial.lane != self.robot_initial.lane || self.human_initial.x >= self.robot_initial.x {
            return bad("the human must start behind the robot in the same lane");
        }
        if self.background.iter().any(|b| b.lane > OUTER_LANE)
            || self.human_initial.lane > OUTER_LANE
        {
            return bad("lanes must be 0 (inner) or 1 (outer)");
        }
        if !(self.snapshot_every > 0.0) || !(self.schedule.replan_secs >= self.planner.plan_dt - 1e-9) {
            return bad("snapshot period must be positive and replanning no faster than a plan step");
        }
        if !(self.schedule.observe_secs > 0.0 && self.schedule.probe_secs > 0.0) {
            return bad("observe and probe windows must be positive");
        }
        Ok(())
    }

    /// Planner settings used while probing.
    pub fn probe_planner(&self) -> PlannerConfig {
        PlannerConfig {
            objective: Objective::Probe,
            min_speed: self.schedule.probe_min_speed,
            max_speed: self.schedule.probe_max_speed,
            ..self.planner.clone()
        }
    }

    fn steps(&self, secs: f64) -> usize {
        ((secs / self.dynamics.dt).round() as usize).max(1)
    }

    fn traffic(&self) -> TrafficParams {
        TrafficParams {
            robot: self.robot_idm,
            human: self.human_idm,
            background: self.background.iter().map(|b| b.idm).collect(),
        }
    }

    pub fn initial_state(&self) -> JointState {
        JointState {
            robot: self.robot_initial,
            human: self.human_initial,
            background: self.background.iter().map(|b| VehicleState::new(b.x, b.v, b.lane)).collect(),
            time: 0.0,
        }
    }
}

/// Spacing at which an IDM follower is in equilibrium behind a leader at the
/// same speed `v`.
pub fn platoon_spacing(v: f64, params: &IdmParams) -> f64 {
    let free = 1.0 - (v / params.v_des).powi(4);
    idm_desired_gap(v, v, params) / free.sqrt()
}

/// IDM constants of every road user.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficParams {
    pub robot: IdmParams,
    pub human: IdmParams,
    pub background: Vec<IdmParams>,
}

impl TrafficParams {
    pub fn of(&self, agent: Agent) -> Option<IdmParams> {
        match agent {
            Agent::Robot => Some(self.robot),
            Agent::Human => Some(self.human),
            Agent::Background(i) => self.background.get(i).copied(),
            Agent::LaneEnd => None,
        }
    }
}

/// Gap-acceptance rule for moving `mover` into `target_lane`:
/// the gap to the new leader must be at least the mover's IDM desired gap and
/// the new follower must not need to brake harder than its preferred
/// deceleration. Unless the change is `mandatory`, the mover must also be
/// held back in its current lane (IDM acceleration at most -0.2 m/s²).
pub fn lane_change_allowed(
    state: &JointState,
    road: &Road,
    traffic: &TrafficParams,
    mover: Agent,
    target_lane: u8,
    mandatory: bool,
) -> bool {
    let Some(me) = agent_state(state, mover) else { return false };
    let Some(params) = traffic.of(mover) else { return false };
    if !mandatory {
        match agent_idm_accel(state, road, mover, &params) {
            Ok(a) if a <= BLOCKED_ACCEL => {}
            Ok(_) => return false,
            Err(_) => {}
        }
    }
    if let Some(leader) = leader_in_lane(state, road, mover, target_lane) {
        let gap = leader.gap_from(me.x);
        if gap <= 0.0 || gap < idm_desired_gap(me.v, leader.state.v, &params) {
            return false;
        }
    }
    if let Some(follower) = follower_in_lane(state, mover, target_lane) {
        let Some(fp) = traffic.of(follower.agent) else { return false };
        match idm_accel(&follower.state, Some(&me), &fp) {
            Ok(a) if a >= -fp.b_pref => {}
            _ => return false,
        }
    }
    true
}

/// Acceleration at or below which a driver counts as blocked.
pub const BLOCKED_ACCEL: f64 = -0.2;

/// The inner lane if the human, currently in the outer lane, would move
/// there. `mandatory` waives the blocked condition (its lane is ending).
pub fn human_lane_change_check(
    state: &JointState,
    road: &Road,
    traffic: &TrafficParams,
    mandatory: bool,
) -> Option<u8> {
    if state.human.lane != OUTER_LANE {
        return None;
    }
    lane_change_allowed(state, road, traffic, Agent::Human, INNER_LANE, mandatory).then_some(INNER_LANE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gap {
    /// Position in the front-to-back list of inner-lane gaps.
    pub index: usize,
    /// Length in m; infinite for the open gap behind the last vehicle.
    pub length: f64,
    pub midpoint: f64,
}

/// Distance behind a lone vehicle reported as the midpoint of its trailing
/// gap, m.
pub const OPEN_GAP_OFFSET: f64 = 50.0;

/// Inner-lane gaps between consecutive background vehicles, front to back.
pub fn inner_gaps(state: &JointState) -> Vec<Gap> {
    let mut xs: Vec<f64> = state.background.iter().filter(|b| b.lane == INNER_LANE).map(|b| b.x).collect();
    xs.sort_by(|a, b| b.total_cmp(a));
    if xs.len() == 1 {
        return vec![Gap { index: 0, length: f64::INFINITY, midpoint: xs[0] - OPEN_GAP_OFFSET }];
    }
    xs.windows(2)
        .enumerate()
        .map(|(index, w)| Gap { index, length: w[0] - w[1], midpoint: 0.5 * (w[0] + w[1]) })
        .collect()
}

/// Widest inner-lane gap. Equal widths go to the gap whose midpoint is
/// nearest ahead of the human (nearest overall if none is ahead).
pub fn widest_gap(state: &JointState) -> Result<Gap, ScenarioError> {
    let gaps = inner_gaps(state);
    let widest = gaps.iter().map(|g| g.length).fold(f64::NEG_INFINITY, f64::max);
    let x = state.human.x;
    let rank = |g: &Gap| {
        let d = g.midpoint - x;
        (d < 0.0, d.abs())
    };
    gaps.into_iter()
        .filter(|g| g.length == widest)
        .min_by(|a, b| {
            let (ra, rb) = (rank(a), rank(b));
            ra.0.cmp(&rb.0).then(ra.1.total_cmp(&rb.1))
        })
        .ok_or(ScenarioError::NoBackgroundVehicles)
}

/// One step of an influence sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum AtomicObjective {
    /// Bring the human level with the widest inner-lane gap.
    AlignWithGap { tolerance: f64 },
    /// Slow to `margin` below the human until it changes lanes.
    BlockAndSlow { margin: f64 },
    /// Move the robot into the inner lane.
    MergeRobot { target_lane: u8 },
    /// Grow the gap ahead of the robot to `target_gap`.
    OpenGap { target_gap: f64 },
    /// Hold the opened gap until the human merges.
    AwaitHumanMerge,
}

impl AtomicObjective {
    pub fn name(&self) -> &'static str {
        match self {
            AtomicObjective::AlignWithGap { .. } => "align_with_gap",
            AtomicObjective::BlockAndSlow { .. } => "block_and_slow",
            AtomicObjective::MergeRobot { .. } => "merge_robot",
            AtomicObjective::OpenGap { .. } => "open_gap",
            AtomicObjective::AwaitHumanMerge => "await_human_merge",
        }
    }
}

/// Ordered objectives that realize the scenario's influence goal for the
/// estimate `phi_hat`.
pub fn influence_objectives(
    kind: ScenarioKind,
    phi_hat: f64,
    cutoff_velocity: f64,
    human_d_min: f64,
    settings: &InfluenceSettings,
) -> Result<Vec<AtomicObjective>, ScenarioError> {
    match kind {
        ScenarioKind::LaneAdvise => {
            if phi_hat < cutoff_velocity {
                return Err(ScenarioError::CutoffNotMet { phi_hat, cutoff: cutoff_velocity });
            }
            Ok(vec![
                AtomicObjective::AlignWithGap { tolerance: settings.align_tolerance },
                AtomicObjective::BlockAndSlow { margin: settings.block_margin },
            ])
        }
        ScenarioKind::GapCreate => Ok(vec![
            AtomicObjective::MergeRobot { target_lane: INNER_LANE },
            AtomicObjective::OpenGap { target_gap: phi_hat + human_d_min.max(settings.gap_margin) },
            AtomicObjective::AwaitHumanMerge,
        ]),
    }
}

/// Estimate of the hidden parameter taken from a belief.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub time: f64,
    pub map: f64,
    pub mean: f64,
    /// One-based grid index of the MAP value.
    pub map_index: usize,
}

impl Estimate {
    fn of(time: f64, belief: &Belief, grid: &HypothesisGrid) -> Self {
        Self {
            time,
            map: estimate_phi(belief, grid, EstimateMode::Map),
            mean: estimate_phi(belief, grid, EstimateMode::Mean),
            map_index: belief.argmax() + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub phase: Phase,
    pub state: JointState,
    /// Controls applied from this record to the next.
    pub robot_accel: f64,
    pub human_accel: f64,
    pub background_accel: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeliefSnapshot {
    pub time: f64,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseChange {
    pub time: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub dt: f64,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<BeliefSnapshot>,
    /// First entry is the phase at t = 0.
    pub phases: Vec<PhaseChange>,
    /// Estimate the robot acted on (or the final one without influence).
    pub estimate: Option<Estimate>,
    pub final_belief: Vec<f64>,
    pub probe_termination: Option<f64>,
    pub influence_start: Option<f64>,
    pub objectives: Vec<AtomicObjective>,
    pub human_lane_change: Option<f64>,
    pub robot_lane_change: Option<f64>,
}

impl RunLog {
    pub fn phase_at(&self, time: f64) -> Phase {
        self.phases.iter().take_while(|p| p.time <= time + 1e-9).last().map_or(Phase::Observe, |p| p.phase)
    }

    /// Belief snapshot taken at `time`, if any.
    pub fn snapshot_at(&self, time: f64) -> Option<&BeliefSnapshot> {
        self.snapshots.iter().find(|s| (s.time - time).abs() < 1e-9)
    }
}

fn class_members(record: &StepRecord, class: VehicleClass) -> Vec<(f64, f64)> {
    match class {
        VehicleClass::Robot => vec![(record.state.robot.v, record.robot_accel)],
        VehicleClass::Human => vec![(record.state.human.v, record.human_accel)],
        VehicleClass::Background => record
            .state
            .background
            .iter()
            .zip(&record.background_accel)
            .map(|(b, &a)| (b.v, a))
            .collect(),
    }
}

/// Per record, `v(t) - v(0)` averaged over the vehicles of `class`.
pub fn velocity_deviation(log: &RunLog, class: VehicleClass) -> Vec<f64> {
    let Some(first) = log.records.first() else { return Vec::new() };
    let v0: Vec<f64> = class_members(first, class).iter().map(|m| m.0).collect();
    if v0.is_empty() {
        return vec![0.0; log.records.len()];
    }
    log.records
        .iter()
        .map(|r| {
            let members = class_members(r, class);
            members.iter().zip(&v0).map(|(m, v)| m.0 - v).sum::<f64>() / v0.len() as f64
        })
        .collect()
}

/// Running integral of `|a| dt` averaged over `class`; entry `k` covers the
/// transitions before record `k`.
pub fn cumulative_abs_control_series(log: &RunLog, class: VehicleClass) -> Vec<f64> {
    let mut total = 0.0;
    let mut out = Vec::with_capacity(log.records.len());
    for (k, _) in log.records.iter().enumerate() {
        if k > 0 {
            let prev = class_members(&log.records[k - 1], class);
            if !prev.is_empty() {
                total += prev.iter().map(|m| m.1.abs()).sum::<f64>() * log.dt / prev.len() as f64;
            }
        }
        out.push(total);
    }
    out
}

pub fn cumulative_abs_control(log: &RunLog, class: VehicleClass) -> f64 {
    cumulative_abs_control_series(log, class).last().copied().unwrap_or(0.0)
}

/// Mean human velocity over records with `start <= t < end`.
pub fn mean_human_velocity(log: &RunLog, start: f64, end: f64) -> Option<f64> {
    let vs: Vec<f64> = log
        .records
        .iter()
        .filter(|r| r.time >= start - 1e-9 && r.time < end - 1e-9)
        .map(|r| r.state.human.v)
        .collect();
    (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
}

/// Smallest gap between consecutive same-lane vehicles over the episode.
pub fn min_same_lane_gap(log: &RunLog) -> f64 {
    log.records
        .iter()
        .map(|r| {
            let mut by_lane: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            let s = &r.state;
            for v in [s.robot, s.human].iter().chain(&s.background) {
                by_lane[v.lane.min(1) as usize].push(v.x);
            }
            by_lane
                .iter_mut()
                .map(|xs| {
                    xs.sort_by(|a, b| a.total_cmp(b));
                    xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

fn agent_name(agent: Agent) -> String {
    match agent {
        Agent::Robot => "robot".into(),
        Agent::Human => "human".into(),
        Agent::Background(i) => format!("background {i}"),
        Agent::LaneEnd => "lane end".into(),
    }
}

fn agents(state: &JointState) -> Vec<(Agent, VehicleState)> {
    let mut v = vec![(Agent::Robot, state.robot), (Agent::Human, state.human)];
    v.extend(state.background.iter().enumerate().map(|(i, b)| (Agent::Background(i), *b)));
    v
}

/// First pair of vehicles that touched or passed through each other in the
/// same lane between `before` and `after`, or ran past the end of their lane.
fn collision(before: &JointState, after: &JointState, road: &Road) -> Option<(Agent, Agent)> {
    let a = agents(before);
    let b = agents(after);
    for i in 0..b.len() {
        for j in (i + 1)..b.len() {
            let (ai, bi) = (a[i].1, b[i].1);
            let (aj, bj) = (a[j].1, b[j].1);
            if bi.lane != bj.lane {
                continue;
            }
            let now = bi.x - bj.x;
            let swapped = ai.lane == bi.lane && aj.lane == bj.lane && (ai.x - aj.x).signum() != now.signum();
            if now == 0.0 || swapped {
                return Some((b[i].0, b[j].0));
            }
        }
    }
    if let Some(end) = road.lane_end {
        for (agent, s) in &b {
            if s.lane == end.lane && s.x >= end.x {
                return Some((*agent, Agent::LaneEnd));
            }
        }
    }
    None
}

/// Decision state of the robot.
struct Controller<'a> {
    config: &'a ScenarioConfig,
    prediction: PredictionModel,
    traffic: TrafficParams,
    phase: Phase,
    /// Remaining planned controls and how many steps the current one has
    /// left.
    plan: Vec<Control>,
    hold: usize,
    plan_steps: usize,
    phi_hat: Option<f64>,
    objectives: Vec<AtomicObjective>,
    current: usize,
    /// Robot-human headway and block target captured when an objective
    /// becomes active.
    headway: f64,
    block_target: f64,
    /// Merge gap the robot opens and then holds.
    gap_target: f64,
    frozen_belief: bool,
}

impl<'a> Controller<'a> {
    fn new(config: &'a ScenarioConfig) -> Self {
        Self {
            config,
            prediction: PredictionModel {
                road: config.road,
                background: config.background.iter().map(|b| b.idm).collect(),
            },
            traffic: config.traffic(),
            phase: Phase::Observe,
            plan: Vec::new(),
            hold: 0,
            plan_steps: config.steps(config.planner.plan_dt),
            phi_hat: None,
            objectives: Vec::new(),
            current: 0,
            headway: 0.0,
            block_target: 0.0,
            gap_target: 0.0,
            frozen_belief: false,
        }
    }

    /// Next planned control, replanning when the held one expires.
    fn next_planned(&mut self) -> Option<Control> {
        if self.hold == 0 || self.plan.is_empty() {
            return None;
        }
        self.hold -= 1;
        let u = self.plan[0];
        if self.hold == 0 {
            self.plan.remove(0);
            if !self.plan.is_empty() {
                self.hold = self.plan_steps;
            }
        }
        Some(u)
    }

    fn set_plan(&mut self, controls: Vec<Control>, keep: usize) {
        self.plan = controls.into_iter().take(keep.max(1)).collect();
        self.hold = self.plan_steps;
    }

    fn replan_steps(&self) -> usize {
        self.config.steps(self.config.schedule.replan_secs)
    }

    fn keep_count(&self) -> usize {
        (self.replan_steps() / self.plan_steps).max(1)
    }

    /// Whether step `k` runs the stopping test, and whether it falls in a
    /// probe window. The test runs at every replan of a probe window and
    /// when a probe window closes.
    fn schedule_point(&self, k: usize) -> (bool, bool) {
        let cfg = self.config;
        let probe_from = cfg.steps(cfg.schedule.observe_secs);
        let in_cycle = k % (probe_from + cfg.steps(cfg.schedule.probe_secs));
        let probing = in_cycle >= probe_from;
        let check = (in_cycle == 0 && k > 0) || (probing && (in_cycle - probe_from).is_multiple_of(self.replan_steps()));
        (check, probing)
    }

    /// Robot control for step `k` of the episode.
    fn control(&mut self, k: usize, state: &JointState, belief: &Belief) -> Result<Control, ScenarioError> {
        let cfg = self.config;
        match self.phase {
            Phase::Observe | Phase::Probe => {
                let (check, probing) = self.schedule_point(k);
                let gathers = cfg.mode == Mode::Active || cfg.schedule.passive_influence;
                let plan = if check && gathers { Some(self.probe(state, belief)?) } else { None };
                if plan.as_ref().is_some_and(|p| p.information < cfg.schedule.termination_information) {
                    self.begin_influence(state, belief);
                    return self.control(k, state, belief);
                }
                if cfg.mode == Mode::Passive || !probing {
                    self.phase = Phase::Observe;
                    self.plan.clear();
                    return Ok(Control::ZERO);
                }
                self.phase = Phase::Probe;
                if let Some(plan) = plan {
                    let keep = self.keep_count();
                    self.set_plan(plan.controls, keep);
                }
                Ok(self.next_planned().unwrap_or(Control::ZERO))
            }
            Phase::Influence => self.influence_control(state),
            Phase::Done => Ok(self.cruise(state)),
        }
    }

    fn probe(&self, state: &JointState, belief: &Belief) -> Result<PlanResult, PlanError> {
        let cfg = self.config;
        probe_plan(state, belief, &cfg.model, &cfg.dynamics, &self.prediction, &cfg.probe_planner())
    }

    fn begin_influence(&mut self, state: &JointState, belief: &Belief) {
        let cfg = self.config;
        let phi_hat = estimate_phi(belief, &cfg.model.grid, EstimateMode::Map);
        self.phi_hat = Some(phi_hat);
        self.frozen_belief = cfg.mode == Mode::Active;
        self.plan.clear();
        self.hold = 0;
        match influence_objectives(cfg.kind, phi_hat, cfg.cutoff_velocity, cfg.human_idm.d_min, &cfg.influence) {
            Ok(list) => {
                self.objectives = list;
                self.current = 0;
                self.phase = Phase::Influence;
                self.activate(state);
            }
            Err(_) => self.phase = Phase::Done,
        }
    }

    fn activate(&mut self, state: &JointState) {
        self.plan.clear();
        self.hold = 0;
        self.headway = state.robot.x - state.human.x;
        match self.objectives.get(self.current) {
            Some(AtomicObjective::BlockAndSlow { margin }) => {
                let phi = self.phi_hat.unwrap_or(state.human.v);
                self.block_target = phi.min(state.human.v) - margin;
            }
            Some(AtomicObjective::OpenGap { target_gap }) => self.gap_target = *target_gap,
            _ => {}
        }
    }

    /// Whether the active objective has been met in `state`.
    fn completed(&self, objective: &AtomicObjective, state: &JointState) -> bool {
        match *objective {
            AtomicObjective::AlignWithGap { tolerance } => {
                widest_gap(state).is_ok_and(|g| (state.human.x - g.midpoint).abs() <= tolerance)
            }
            AtomicObjective::BlockAndSlow { .. } | AtomicObjective::AwaitHumanMerge => {
                state.human.lane == INNER_LANE
            }
            AtomicObjective::MergeRobot { target_lane } => state.robot.lane == target_lane,
            AtomicObjective::OpenGap { target_gap } => {
                gap_deficit(state, &self.config.road, target_gap, self.config.influence.behind_margin) <= 0.0
            }
        }
    }

    fn influence_control(&mut self, state: &JointState) -> Result<Control, ScenarioError> {
        let cfg = self.config;
        while self.current < self.objectives.len() && self.completed(&self.objectives[self.current], state) {
            self.current += 1;
            self.activate(state);
        }
        // The human merging ends the influence early.
        if self.current >= self.objectives.len() || state.human.lane == INNER_LANE {
            self.phase = Phase::Done;
            return Ok(self.cruise(state));
        }
        let objective = self.objectives[self.current];
        if let AtomicObjective::MergeRobot { target_lane } = objective {
            if lane_change_allowed(state, &cfg.road, &self.traffic, Agent::Robot, target_lane, true) {
                self.plan.clear();
                self.hold = 0;
                return Ok(Control { accel: 0.0, lane_change: Some(target_lane) });
            }
        }
        if let Some(u) = self.next_planned() {
            return Ok(u);
        }
        let phi_hat = self.phi_hat.unwrap_or(state.human.v);
        let planner = PlannerConfig { objective: Objective::Influence, ..cfg.planner.clone() };
        let scale = cfg.influence.position_scale;
        let headway = self.headway;
        let block_target = self.block_target;
        let road = cfg.road;
        let gap_target = self.gap_target;
        let (behind_margin, open_secs) = (cfg.influence.behind_margin, cfg.influence.open_secs);
        let reward = move |s: &JointState| -> f64 {
            match objective {
                AtomicObjective::AlignWithGap { .. } => match widest_gap(s) {
                    Ok(g) => -((s.robot.x - headway - g.midpoint) / scale).powi(2),
                    Err(_) => 0.0,
                },
                AtomicObjective::BlockAndSlow { .. } => {
                    let align = widest_gap(s).map_or(0.0, |g| ((s.robot.x - headway - g.midpoint) / scale).powi(2));
                    -(s.robot.v - block_target).powi(2) - align
                }
                AtomicObjective::MergeRobot { target_lane } => merge_slot_reward(s, target_lane, scale),
                AtomicObjective::OpenGap { .. } | AtomicObjective::AwaitHumanMerge => {
                    let pace = leader_in_lane(s, &road, Agent::Robot, s.robot.lane).map_or(s.human.v, |l| l.state.v);
                    let deficit = gap_deficit(s, &road, gap_target, behind_margin);
                    -(s.robot.v - (pace - deficit / open_secs)).powi(2)
                }
            }
        };
        let plan = influence_plan(state, phi_hat, &cfg.model, &cfg.dynamics, &self.prediction, &planner, &reward)?;
        let keep = self.keep_count();
        self.set_plan(plan.controls, keep);
        Ok(self.next_planned().unwrap_or(Control::ZERO))
    }

    /// IDM car-following with the robot's own constants, within its bounds.
    fn cruise(&self, state: &JointState) -> Control {
        let (lo, hi) = self.config.dynamics.robot_accel_bounds;
        let a = agent_idm_accel(state, &self.config.road, Agent::Robot, &self.config.robot_idm).unwrap_or(lo);
        Control::accel(a.clamp(lo, hi))
    }
}

/// How far the robot still has to fall back, m: until the gap ahead of it
/// reaches `target_gap` and it sits `behind_margin` behind the human.
fn gap_deficit(s: &JointState, road: &Road, target_gap: f64, behind_margin: f64) -> f64 {
    let gap = gap_ahead(s, road, Agent::Robot).map_or(0.0, |g| target_gap - g);
    gap.max(s.robot.x - (s.human.x - behind_margin)).max(0.0)
}

/// Distance from `agent` to its current-lane leader.
fn gap_ahead(state: &JointState, road: &Road, agent: Agent) -> Option<f64> {
    let me = agent_state(state, agent)?;
    leader_in_lane(state, road, agent, me.lane).map(|l| l.gap_from(me.x))
}

/// Speed matching is secondary to reaching the slot while merging.
const MERGE_SPEED_WEIGHT: f64 = 0.1;

/// Tracking reward toward the middle of the target-lane gap around the
/// robot, loosely at the speed of the vehicle ahead of that gap.
fn merge_slot_reward(s: &JointState, target_lane: u8, scale: f64) -> f64 {
    let x = s.robot.x;
    let mut ahead: Option<VehicleState> = None;
    let mut behind: Option<VehicleState> = None;
    for b in s.background.iter().filter(|b| b.lane == target_lane) {
        if b.x >= x && ahead.is_none_or(|a| b.x < a.x) {
            ahead = Some(*b);
        }
        if b.x < x && behind.is_none_or(|a| b.x > a.x) {
            behind = Some(*b);
        }
    }
    match (ahead, behind) {
        (Some(a), Some(b)) => {
            -((x - 0.5 * (a.x + b.x)) / scale).powi(2) - MERGE_SPEED_WEIGHT * (s.robot.v - a.v).powi(2)
        }
        (Some(a), None) => -MERGE_SPEED_WEIGHT * (s.robot.v - a.v).powi(2),
        _ => 0.0,
    }
}

/// Runs one episode. A collision aborts the run; the error carries the log
/// up to the colliding step.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunLog, ScenarioError> {
    config.validate()?;
    let dt = config.dynamics.dt;
    let n_steps = (config.duration / dt).round() as usize;
    let snapshot_steps = if config.record_all_beliefs { 1 } else { config.steps(config.snapshot_every) };
    let mandatory = config.kind == ScenarioKind::GapCreate;
    let traffic = config.traffic();
    let human_grid = &config.dynamics.human_accel_grid;

    let mut controller = Controller::new(config);
    let mut state = config.initial_state();
    let mut belief = Belief::uniform(config.model.grid.len());
    let mut log = RunLog {
        dt,
        records: Vec::with_capacity(n_steps + 1),
        snapshots: Vec::new(),
        phases: Vec::new(),
        estimate: None,
        final_belief: Vec::new(),
        probe_termination: None,
        influence_start: None,
        objectives: Vec::new(),
        human_lane_change: None,
        robot_lane_change: None,
    };

    for k in 0..=n_steps {
        let time = k as f64 * dt;
        state.time = time;
        if k % snapshot_steps == 0 {
            log.snapshots.push(BeliefSnapshot { time, probabilities: belief.probabilities().to_vec() });
        }

        let was_influencing = controller.phase == Phase::Influence;
        let robot_u = controller.control(k, &state, &belief)?;
        if controller.phi_hat.is_some() && log.estimate.is_none() {
            log.estimate = Some(Estimate::of(time, &belief, &config.model.grid));
            if config.mode == Mode::Active {
                log.probe_termination = Some(time);
            }
            log.objectives = controller.objectives.clone();
            if controller.phase == Phase::Influence && !was_influencing {
                log.influence_start = Some(time);
            }
        }
        if log.phases.last().is_none_or(|p| p.phase != controller.phase) {
            log.phases.push(PhaseChange { time, phase: controller.phase });
        }

        let collide = |log: RunLog, first: Agent, second: Agent| ScenarioError::Collision {
            time,
            first: agent_name(first),
            second: agent_name(second),
            partial: Box::new(log),
        };
        let human_accel = match agent_idm_accel(&state, &config.road, Agent::Human, &config.human_idm) {
            Ok(a) => a,
            Err(DynamicsError::NonPositiveGap { .. }) => {
                let other = leader_in_lane(&state, &config.road, Agent::Human, state.human.lane)
                    .map_or(Agent::Robot, |l| l.agent);
                return Err(collide(log, Agent::Human, other));
            }
            Err(e) => return Err(ScenarioError::InvalidConfig(e.to_string())),
        };
        let mut background_accel = Vec::with_capacity(state.background.len());
        for i in 0..state.background.len() {
            match agent_idm_accel(&state, &config.road, Agent::Background(i), &traffic.background[i]) {
                Ok(a) => background_accel.push(a),
                Err(_) => {
                    let other = leader_in_lane(&state, &config.road, Agent::Background(i), state.background[i].lane)
                        .map_or(Agent::Robot, |l| l.agent);
                    return Err(collide(log, Agent::Background(i), other));
                }
            }
        }
        let phase = controller.phase;
        log.records.push(StepRecord {
            time,
            phase,
            state: state.clone(),
            robot_accel: robot_u.accel,
            human_accel,
            background_accel: background_accel.clone(),
        });
        if k == n_steps {
            break;
        }

        let human_lane = human_lane_change_check(&state, &config.road, &traffic, mandatory);
        let human_u = Control { accel: human_accel, lane_change: human_lane };
        // The robot observes the human while it follows in the robot's lane.
        if !controller.frozen_belief && human_lane.is_none() && state.human.lane == state.robot.lane {
            belief = belief_update(&belief, &state, &robot_u, &human_u, &config.model, human_grid)?;
        }
        if human_lane.is_some() && log.human_lane_change.is_none() {
            log.human_lane_change = Some(time + dt);
        }
        if robot_u.lane_change.is_some() && log.robot_lane_change.is_none() {
            log.robot_lane_change = Some(time + dt);
        }

        let next = joint_step(&state, &robot_u, &human_u, &background_accel, dt);
        if let Some((a, b)) = collision(&state, &next, &config.road) {
            return Err(collide(log, a, b));
        }
        state = next;
    }

    if log.estimate.is_none() {
        log.estimate = Some(Estimate::of(config.duration, &belief, &config.model.grid));
    }
    log.final_belief = belief.probabilities().to_vec();
    Ok(log)
}
