//! Boltzmann-rational observation model of the human driver and the
//! discrete Bayesian filter over its hidden parameter.
//!
//! The human is modeled as scoring each candidate acceleration by the utility
//! of the state it leads to: the acceleration (and the robot's current
//! control) is held for `lookahead` seconds, integrated with
//! `lookahead_substeps` Euler steps while background traffic coasts. Action
//! probabilities are a softmax of `rationality_beta * utility` over the
//! discretized human action set.
//!
//! The ground-truth human in the simulator is an IDM driver, not this model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{leader_in_lane, step_vehicle, Agent, Road};
use crate::model::{
    normalize_in_place, Belief, Control, GridKind, HypothesisGrid, JointState, ModelError, VehicleState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("non-positive gap {gap:.3} m ahead of the human")]
    NonPositiveGap { gap: f64 },

    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityWeights {
    pub speed: f64,
    pub headway: f64,
    pub safety: f64,
}

impl Default for UtilityWeights {
    fn default() -> Self {
        Self { speed: 1.0, headway: 0.05, safety: 1.0 }
    }
}

/// Speed the human tracks under a headway hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedReference {
    /// The model's `reference_velocity`.
    #[default]
    Fixed,
    /// The leader's speed, falling back to `reference_velocity` on a free
    /// road.
    Leader,
}

/// Quadratic-feature utility model of the human, parameterized by a grid of
/// desired velocities or desired headways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanUtilityModel {
    pub grid: HypothesisGrid,
    pub weights: UtilityWeights,
    pub rationality_beta: f64,
    /// Velocity the human is assumed to hold while headway is probed, m/s.
    pub reference_velocity: f64,
    pub speed_reference: SpeedReference,
    /// Length scale of the proximity penalty `(d / gap)^2`, m.
    pub safety_distance: f64,
    /// Upper bound of the proximity penalty.
    pub penalty_cap: f64,
    /// Seconds an action is held when the human scores it.
    pub lookahead: f64,
    pub lookahead_substeps: usize,
    /// Seconds the human expects the robot to keep its current control
    /// before coasting.
    pub leader_hold: f64,
}

impl HumanUtilityModel {
    pub fn new(grid: HypothesisGrid) -> Self {
        Self {
            grid,
            weights: UtilityWeights::default(),
            rationality_beta: 1.0,
            reference_velocity: 20.0,
            speed_reference: SpeedReference::Fixed,
            safety_distance: 2.0,
            penalty_cap: 10.0,
            lookahead: 1.0,
            lookahead_substeps: 1,
            leader_hold: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let w = &self.weights;
        if [w.speed, w.headway, w.safety].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err("utility weights must be nonnegative".into());
        }
        if !(self.rationality_beta.is_finite() && self.rationality_beta > 0.0) {
            return Err("rationality_beta must be positive".into());
        }
        if !(self.lookahead > 0.0) || self.lookahead_substeps == 0 {
            return Err("lookahead must be positive with at least one substep".into());
        }
        if !(self.leader_hold >= 0.0) {
            return Err("leader_hold must be nonnegative".into());
        }
        Ok(())
    }
}

/// Human velocity, and gap to and speed of the human's leader, in some state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanFeatures {
    pub velocity: f64,
    /// `None` when nothing is ahead of the human.
    pub gap: Option<f64>,
    pub leader_velocity: Option<f64>,
}

impl HumanFeatures {
    pub fn of(state: &JointState) -> Self {
        let leader = leader_in_lane(state, &Road::default(), Agent::Human, state.human.lane);
        Self {
            velocity: state.human.v,
            gap: leader.map(|l| l.gap_from(state.human.x)),
            leader_velocity: leader.map(|l| l.state.v),
        }
    }
}

/// Utility of features for the physical parameter value `phi`. Predicted
/// overlaps (gap <= 0) saturate the proximity penalty.
pub fn utility_of(features: &HumanFeatures, phi: f64, model: &HumanUtilityModel) -> f64 {
    let w = &model.weights;
    match model.grid.kind() {
        GridKind::DesiredVelocity => {
            let penalty = match features.gap {
                None => 0.0,
                Some(g) if g <= 0.0 => model.penalty_cap,
                Some(g) => (model.safety_distance / g).powi(2).min(model.penalty_cap),
            };
            -w.speed * (features.velocity - phi).powi(2) - w.safety * penalty
        }
        GridKind::DesiredHeadway => {
            let headway = features.gap.map_or(0.0, |g| w.headway * (g - phi).powi(2));
            let target = match (model.speed_reference, features.leader_velocity) {
                (SpeedReference::Leader, Some(v)) => v,
                _ => model.reference_velocity,
            };
            -headway - w.speed * (features.velocity - target).powi(2)
        }
    }
}

/// Utility of `state` under hypothesis `phi` (zero-based grid position).
pub fn human_utility(
    state: &JointState,
    model: &HumanUtilityModel,
    phi: usize,
) -> Result<f64, InferenceError> {
    let features = HumanFeatures::of(state);
    if let Some(gap) = features.gap {
        if gap <= 0.0 {
            return Err(InferenceError::NonPositiveGap { gap });
        }
    }
    let value = grid_position_value(&model.grid, phi)?;
    Ok(utility_of(&features, value, model))
}

fn grid_position_value(grid: &HypothesisGrid, phi: usize) -> Result<f64, ModelError> {
    grid.grid_value(phi + 1)
}

/// State reached by holding both controls for the model's lookahead. The
/// human's leader keeps its identity across the substeps.
pub fn lookahead_features(
    state: &JointState,
    robot_u: &Control,
    human_accel: f64,
    model: &HumanUtilityModel,
) -> HumanFeatures {
    Lookahead::new(state, robot_u).features(human_accel, model)
}

/// The human and its leader, the only vehicles the lookahead moves. The
/// leader is the robot, holding its control for `leader_hold` seconds and
/// coasting after, or a coasting background vehicle.
#[derive(Debug, Clone, Copy)]
struct Lookahead {
    human: VehicleState,
    lead: Option<(VehicleState, Control)>,
}

impl Lookahead {
    fn new(state: &JointState, robot_u: &Control) -> Self {
        let leader = leader_in_lane(state, &Road::default(), Agent::Human, state.human.lane);
        let lead = match leader.map(|l| l.agent) {
            Some(Agent::Robot) => Some((state.robot, Control::accel(robot_u.accel))),
            Some(Agent::Background(i)) => Some((state.background[i], Control::ZERO)),
            _ => None,
        };
        Self { human: state.human, lead }
    }

    fn features(&self, human_accel: f64, model: &HumanUtilityModel) -> HumanFeatures {
        let dt = model.lookahead / model.lookahead_substeps as f64;
        let human_u = Control::accel(human_accel);
        let mut human = self.human;
        let mut lead = self.lead;
        for i in 0..model.lookahead_substeps {
            human = step_vehicle(&human, &human_u, dt);
            let held = (i as f64 + 0.5) * dt < model.leader_hold;
            lead = lead.map(|(l, u)| (step_vehicle(&l, if held { &u } else { &Control::ZERO }, dt), u));
        }
        HumanFeatures {
            velocity: human.v,
            gap: lead.map(|(l, _)| l.x - human.x),
            leader_velocity: lead.map(|(l, _)| l.v),
        }
    }
}

/// Zero-based position of the grid point nearest `accel`; exact ties go to
/// the value closer to zero.
pub fn snap_to_grid(accel: f64, grid: &[f64]) -> usize {
    let mut best = 0;
    for (i, &g) in grid.iter().enumerate().skip(1) {
        let d = (g - accel).abs();
        let d_best = (grid[best] - accel).abs();
        if d < d_best || (d == d_best && g.abs() < grid[best].abs()) {
            best = i;
        }
    }
    best
}

/// In-place log-softmax of `beta * utilities`, stabilized by max subtraction.
pub fn log_softmax(beta: f64, utilities: &mut [f64]) {
    let max = utilities.iter().fold(f64::NEG_INFINITY, |m, &u| m.max(beta * u));
    let mut total = 0.0;
    for u in utilities.iter_mut() {
        *u = beta * *u - max;
        total += u.exp();
    }
    let log_total = total.ln();
    for u in utilities.iter_mut() {
        *u -= log_total;
    }
}

/// Successor features of every human action for one (state, robot control)
/// pair. Likelihoods and best responses for any hypothesis derive from it.
#[derive(Debug, Clone)]
pub struct ResponseTable<'a> {
    model: &'a HumanUtilityModel,
    actions: &'a [f64],
    features: Vec<HumanFeatures>,
}

impl<'a> ResponseTable<'a> {
    pub fn new(
        state: &JointState,
        robot_u: &Control,
        model: &'a HumanUtilityModel,
        actions: &'a [f64],
    ) -> Self {
        let lookahead = Lookahead::new(state, robot_u);
        let features = actions.iter().map(|&a| lookahead.features(a, model)).collect();
        Self { model, actions, features }
    }

    pub fn actions(&self) -> &[f64] {
        self.actions
    }

    /// Utilities of every action under the physical value `phi`.
    pub fn utilities_into(&self, phi: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.features.iter().map(|f| utility_of(f, phi, self.model)));
    }

    pub fn utilities(&self, phi: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.actions.len());
        self.utilities_into(phi, &mut out);
        out
    }

    /// Log-probability of action `action` under `phi`.
    pub fn log_likelihood(&self, phi: f64, action: usize) -> f64 {
        let mut u = self.utilities(phi);
        log_softmax(self.model.rationality_beta, &mut u);
        u[action]
    }

    /// Log-probability of `action` under every grid hypothesis, written to
    /// `out` in grid order.
    pub fn log_likelihood_per_hypothesis(&self, action: usize, out: &mut [f64]) {
        let mut scratch = Vec::with_capacity(self.actions.len());
        for (slot, &phi) in out.iter_mut().zip(self.model.grid.values()) {
            self.utilities_into(phi, &mut scratch);
            log_softmax(self.model.rationality_beta, &mut scratch);
            *slot = scratch[action];
        }
    }

    /// Best response and action log-likelihoods of every grid hypothesis.
    pub fn per_hypothesis(&self) -> HypothesisResponses {
        let n = self.model.grid.len();
        let m = self.actions.len();
        let mut best = Vec::with_capacity(n);
        let mut log_likelihoods = Vec::with_capacity(n * m);
        let mut row = Vec::with_capacity(m);
        for &phi in self.model.grid.values() {
            self.utilities_into(phi, &mut row);
            best.push(self.argmax(&row));
            log_softmax(self.model.rationality_beta, &mut row);
            log_likelihoods.extend_from_slice(&row);
        }
        HypothesisResponses { actions: m, best, log_likelihoods }
    }

    /// Utility-maximizing action under `phi`. Ties prefer the smallest
    /// magnitude, then the lower value.
    pub fn best_response(&self, phi: f64) -> usize {
        self.argmax(&self.utilities(phi))
    }

    fn argmax(&self, utilities: &[f64]) -> usize {
        let mut best = 0;
        for (i, &u) in utilities.iter().enumerate().skip(1) {
            let (a, b) = (self.actions[i], self.actions[best]);
            let best_u = utilities[best];
            if u > best_u || (u == best_u && (a.abs() < b.abs() || (a.abs() == b.abs() && a < b))) {
                best = i;
            }
        }
        best
    }
}

/// Output of [`ResponseTable::per_hypothesis`].
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisResponses {
    actions: usize,
    /// Best-response action of each hypothesis.
    pub best: Vec<usize>,
    /// Row-major `[hypothesis][action]` log-likelihoods.
    pub log_likelihoods: Vec<f64>,
}

impl HypothesisResponses {
    /// Log-likelihood of `action` under every hypothesis, in grid order.
    pub fn column_into(&self, action: usize, out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = self.log_likelihoods[k * self.actions + action];
        }
    }
}

/// Probability that a human of type `phi` (zero-based) picks `human_u`,
/// after snapping it to the human action grid. Clamped to the open unit
/// interval.
pub fn boltzmann_likelihood(
    state: &JointState,
    robot_u: &Control,
    human_u: &Control,
    phi: usize,
    model: &HumanUtilityModel,
    human_grid: &[f64],
) -> Result<f64, InferenceError> {
    let value = grid_position_value(&model.grid, phi)?;
    let action = snap_to_grid(human_u.accel, human_grid);
    let table = ResponseTable::new(state, robot_u, model, human_grid);
    let p = table.log_likelihood(value, action).exp();
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Posterior from a prior and per-hypothesis log-likelihoods, each applied
/// `repeats` times. Works in log space so that no weight underflows to zero.
pub fn posterior_from_log_likelihoods(
    prior: &[f64],
    log_likelihoods: &[f64],
    repeats: f64,
    out: &mut [f64],
) -> Result<(), ModelError> {
    let mut max = f64::NEG_INFINITY;
    for ((slot, &p), &ll) in out.iter_mut().zip(prior).zip(log_likelihoods) {
        *slot = p.ln() + repeats * ll;
        max = max.max(*slot);
    }
    for slot in out.iter_mut() {
        *slot = (*slot - max).exp();
    }
    normalize_in_place(out)
}

/// One step of the Bayesian filter given the observed human control.
pub fn belief_update(
    belief: &Belief,
    state: &JointState,
    robot_u: &Control,
    observed_human_u: &Control,
    model: &HumanUtilityModel,
    human_grid: &[f64],
) -> Result<Belief, InferenceError> {
    if belief.len() != model.grid.len() {
        return Err(ModelError::LengthMismatch { belief: belief.len(), grid: model.grid.len() }.into());
    }
    let action = snap_to_grid(observed_human_u.accel, human_grid);
    let table = ResponseTable::new(state, robot_u, model, human_grid);
    let mut ll = vec![0.0; belief.len()];
    table.log_likelihood_per_hypothesis(action, &mut ll);
    let mut out = vec![0.0; belief.len()];
    posterior_from_log_likelihoods(belief.probabilities(), &ll, 1.0, &mut out)?;
    Ok(Belief::from_normalized(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    /// Value of the most likely hypothesis (ties to the lower index).
    Map,
    /// Belief-weighted mean of the grid values.
    Mean,
}

pub fn estimate_phi(belief: &Belief, grid: &HypothesisGrid, mode: EstimateMode) -> f64 {
    match mode {
        EstimateMode::Map => grid.values()[belief.argmax()],
        EstimateMode::Mean => belief
            .probabilities()
            .iter()
            .zip(grid.values())
            .map(|(p, v)| p * v)
            .sum(),
    }
}
