//! Receding-horizon planners for the robot.
//!
//! Both planners search over open-loop sequences of robot accelerations
//! drawn from the admissible grid. In every predicted step the human plays
//! its best response (the utility-maximizing action under a hypothesis) and
//! background traffic follows its IDM law.
//!
//! * [`probe_plan`] maximizes the belief-weighted information radius between
//!   the current belief and the belief predicted at the end of the horizon,
//!   plus a proximity penalty. Every hypothesis gets its own predicted branch.
//!   The objective is written as a sum of per-step JSD increments, which
//!   telescopes to the terminal JSD, so it decomposes into stage rewards.
//! * [`influence_plan`] maximizes a scenario-supplied robot reward against a
//!   human of known type.
//!
//! Both are solved by depth-first dynamic programming with memoization on
//! the predicted node. The result equals exhaustive enumeration of all
//! `|actions|^T` sequences; ties are broken toward the sequence that is first
//! in the action priority order (smallest magnitude, then smaller value).

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::jsd_slice;
use crate::dynamics::{background_idm_accels, joint_step, DynamicsConfig, IdmParams, Road, HARD_BRAKE};
use crate::inference::{posterior_from_log_likelihoods, HumanUtilityModel, HypothesisResponses, ResponseTable};
use crate::model::{Belief, Control, JointState, ModelError, VehicleState};
use crate::par::{map_ordered, Parallelism};

/// Values closer than this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("search needed more than {budget} node expansions ({actions} actions, horizon {horizon}); coarsen the grid")]
    HorizonTooLarge { budget: usize, actions: usize, horizon: usize },

    #[error("planner objective is {0:?}")]
    WrongObjective(Objective),

    #[error("belief has {belief} entries but the model grid has {grid}")]
    BeliefMismatch { belief: usize, grid: usize },

    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Probe,
    Influence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon_steps: usize,
    /// Seconds per planning step.
    pub plan_dt: f64,
    /// Weight of the proximity penalty.
    pub safety_weight: f64,
    /// Length scale of the proximity penalty, m.
    pub safe_distance: f64,
    /// Upper bound of each pairwise proximity penalty term.
    pub safety_cap: f64,
    pub objective: Objective,
    /// Maximum number of node expansions before giving up.
    pub node_budget: usize,
    /// How many times a predicted observation counts in the predicted belief;
    /// the filter sees one observation per simulation step, so this is
    /// normally `plan_dt / dt`.
    pub evidence_repeats: f64,
    /// Planned sequences keep the robot within `[min_speed, max_speed]`,
    /// m/s; the upper end defaults to the robot speed limit.
    pub min_speed: f64,
    pub max_speed: Option<f64>,
    pub parallelism: Parallelism,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 5,
            plan_dt: 1.0,
            safety_weight: 0.5,
            safe_distance: 10.0,
            safety_cap: 100.0,
            objective: Objective::Probe,
            node_budget: 20_000,
            evidence_repeats: 1.0,
            min_speed: 0.0,
            max_speed: None,
            parallelism: Parallelism::default(),
        }
    }
}

impl PlannerConfig {
    /// Highest speed a plan may reach.
    pub fn speed_cap(&self, dynamics: &DynamicsConfig) -> f64 {
        self.max_speed.map_or(dynamics.robot_speed_limit, |v| v.min(dynamics.robot_speed_limit))
    }

    pub fn validate(&self, dynamics: &DynamicsConfig) -> Result<(), String> {
        if self.horizon_steps == 0 {
            return Err("horizon_steps must be at least 1".into());
        }
        if !(self.plan_dt >= dynamics.dt) {
            return Err("plan_dt must be at least the simulation dt".into());
        }
        if !(self.safety_weight >= 0.0 && self.safe_distance > 0.0 && self.safety_cap > 0.0) {
            return Err("safety parameters must be nonnegative".into());
        }
        if !(self.evidence_repeats > 0.0) {
            return Err("evidence_repeats must be positive".into());
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.speed_cap(dynamics)) {
            return Err("min_speed must lie between zero and the speed cap".into());
        }
        if self.max_speed.is_some_and(|v| !(v > 0.0)) {
            return Err("max_speed must be positive".into());
        }
        Ok(())
    }
}

/// How the planner predicts traffic other than the human.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionModel {
    pub road: Road,
    /// IDM constants of each background vehicle. Empty means background
    /// vehicles coast.
    pub background: Vec<IdmParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanResult {
    pub controls: Vec<Control>,
    /// Optimal objective value.
    pub value: f64,
    /// Belief-weighted terminal JSD of the returned sequence (probing only).
    pub information: f64,
    pub explored_nodes: usize,
}

/// Robot utility for one predicted state; the active atomic objective
/// during influence.
pub trait RobotReward: Sync {
    fn reward(&self, state: &JointState) -> f64;
}

impl<F: Fn(&JointState) -> f64 + Sync> RobotReward for F {
    fn reward(&self, state: &JointState) -> f64 {
        self(state)
    }
}

/// Proximity penalty `-sum min(cap, (d_safe / gap)^2)` over every vehicle in
/// the robot's lane.
pub fn safety_reward(state: &JointState, safe_distance: f64, cap: f64) -> f64 {
    let robot = state.robot;
    let term = |other: &VehicleState| {
        if other.lane != robot.lane {
            return 0.0;
        }
        let gap = (other.x - robot.x).abs();
        if gap <= 0.0 {
            cap
        } else {
            (safe_distance / gap).powi(2).min(cap)
        }
    };
    -(term(&state.human) + state.background.iter().map(term).sum::<f64>())
}

/// Human best response to `robot_u` for the physical parameter value `phi`.
pub fn best_response(
    state: &JointState,
    robot_u: &Control,
    phi: f64,
    model: &HumanUtilityModel,
    human_grid: &[f64],
) -> Control {
    let table = ResponseTable::new(state, robot_u, model, human_grid);
    Control::accel(human_grid[table.best_response(phi)])
}

/// Robot actions in tie-break priority order.
pub fn action_priority(grid: &[f64]) -> Vec<f64> {
    let mut actions = grid.to_vec();
    actions.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    actions
}

/// Accelerations may not push the speed out of `[min_speed, speed_cap]`;
/// zero is always allowed.
fn admissible(robot: &VehicleState, accel: f64, planner: &PlannerConfig, speed_cap: f64) -> bool {
    let v = robot.v + accel * planner.plan_dt;
    (accel <= 0.0 || v <= speed_cap + 1e-9) && (accel >= 0.0 || v >= planner.min_speed - 1e-9)
}

fn predicted_background(state: &JointState, prediction: &PredictionModel) -> Vec<f64> {
    if prediction.background.is_empty() {
        return Vec::new();
    }
    background_idm_accels(state, &prediction.road, &prediction.background)
        .unwrap_or_else(|_| vec![-HARD_BRAKE; state.background.len()])
}

struct Context<'a> {
    model: &'a HumanUtilityModel,
    dynamics: &'a DynamicsConfig,
    prediction: &'a PredictionModel,
    planner: &'a PlannerConfig,
    actions: Vec<f64>,
}

impl Context<'_> {
    fn safety(&self, s: &JointState) -> f64 {
        self.planner.safety_weight
            * safety_reward(s, self.planner.safe_distance, self.planner.safety_cap)
    }

    /// One planning step with the human answering under `phi`.
    fn advance(&self, s: &JointState, accel: f64, phi: f64) -> JointState {
        let robot_u = Control::accel(accel);
        let table = ResponseTable::new(s, &robot_u, self.model, &self.dynamics.human_accel_grid);
        let h = table.best_response(phi);
        let human_u = Control::accel(self.dynamics.human_accel_grid[h]);
        let bg = predicted_background(s, self.prediction);
        joint_step(s, &robot_u, &human_u, &bg, self.planner.plan_dt)
    }
}

// ---------------------------------------------------------------------------
// Probing

#[derive(Clone)]
struct Branch {
    state: JointState,
    belief: Vec<f64>,
    /// JSD between the root belief and `belief`.
    jsd: f64,
}

#[derive(Clone)]
struct ProbeNode {
    branches: Vec<Branch>,
}

struct ProbeProblem<'a> {
    ctx: Context<'a>,
    root_belief: Vec<f64>,
}

impl ProbeProblem<'_> {
    /// Belief-weighted stage reward and successor node. Branches that sit in
    /// the same predicted state share their likelihood tables and
    /// successors.
    fn stage(&self, node: &ProbeNode, accel: f64) -> Result<(f64, ProbeNode), ModelError> {
        let ctx = &self.ctx;
        let grid = &ctx.dynamics.human_accel_grid;
        let robot_u = Control::accel(accel);
        let n = node.branches.len();
        // (representative branch, responses, successor per action)
        let mut shared: Vec<(usize, HypothesisResponses, Vec<Option<JointState>>)> = Vec::new();
        let mut ll = vec![0.0; n];
        let mut reward = 0.0;
        let mut branches = Vec::with_capacity(n);
        for (phi, branch) in node.branches.iter().enumerate() {
            let g = match shared.iter().position(|(rep, _, _)| node.branches[*rep].state == branch.state) {
                Some(g) => g,
                None => {
                    let table = ResponseTable::new(&branch.state, &robot_u, ctx.model, grid);
                    shared.push((phi, table.per_hypothesis(), vec![None; grid.len()]));
                    shared.len() - 1
                }
            };
            let (_, responses, successors) = &mut shared[g];
            let h = responses.best[phi];
            responses.column_into(h, &mut ll);
            let mut belief = vec![0.0; n];
            posterior_from_log_likelihoods(&branch.belief, &ll, ctx.planner.evidence_repeats, &mut belief)?;
            let state = successors[h]
                .get_or_insert_with(|| {
                    let human_u = Control::accel(grid[h]);
                    let bg = predicted_background(&branch.state, ctx.prediction);
                    joint_step(&branch.state, &robot_u, &human_u, &bg, ctx.planner.plan_dt)
                })
                .clone();
            let jsd = jsd_slice(&self.root_belief, &belief);
            reward += self.root_belief[phi] * (jsd - branch.jsd + ctx.safety(&state));
            branches.push(Branch { state, belief, jsd });
        }
        Ok((reward, ProbeNode { branches }))
    }

    fn keys(&self, node: &ProbeNode, depth: usize) -> (u64, u64) {
        let mut coarse = DefaultHasher::new();
        let mut exact = DefaultHasher::new();
        depth.hash(&mut coarse);
        depth.hash(&mut exact);
        for b in &node.branches {
            hash_state(&b.state, &mut coarse, &mut exact);
            for p in &b.belief {
                p.to_bits().hash(&mut coarse);
                p.to_bits().hash(&mut exact);
            }
        }
        (coarse.finish(), exact.finish())
    }

    fn robot(node: &ProbeNode) -> VehicleState {
        node.branches[0].state.robot
    }
}

/// Quantized (0.1 m, 0.01 m/s) and exact hashes of a state.
fn hash_state(s: &JointState, coarse: &mut DefaultHasher, exact: &mut DefaultHasher) {
    let vehicles = [s.robot, s.human].into_iter().chain(s.background.iter().copied());
    for v in vehicles {
        ((v.x * 10.0).round() as i64).hash(coarse);
        ((v.v * 100.0).round() as i64).hash(coarse);
        v.lane.hash(coarse);
        v.x.to_bits().hash(exact);
        v.v.to_bits().hash(exact);
        v.lane.hash(exact);
    }
}

/// Generic depth-first DP with memoization; shared by both planners.
trait Problem: Sync {
    type Node: Clone + Send + Sync;
    fn actions(&self) -> &[f64];
    fn is_admissible(&self, node: &Self::Node, accel: f64) -> bool;
    fn stage(&self, node: &Self::Node, accel: f64) -> Result<(f64, Self::Node), PlanError>;
    fn keys(&self, node: &Self::Node, depth: usize) -> (u64, u64);
}

struct MemoEntry {
    exact: u64,
    value: f64,
    tail: Vec<usize>,
}

struct Search<'p, P: Problem> {
    problem: &'p P,
    memo: HashMap<u64, Vec<MemoEntry>>,
    expanded: &'p AtomicUsize,
    budget: usize,
    horizon: usize,
}

impl<P: Problem> Search<'_, P> {
    /// Best value and action indices over `depth` remaining steps.
    fn solve(&mut self, node: &P::Node, depth: usize) -> Result<(f64, Vec<usize>), PlanError> {
        if depth == 0 {
            return Ok((0.0, Vec::new()));
        }
        let (coarse, exact) = self.problem.keys(node, depth);
        if let Some(entries) = self.memo.get(&coarse) {
            if let Some(e) = entries.iter().find(|e| e.exact == exact) {
                return Ok((e.value, e.tail.clone()));
            }
        }
        let count = self.expanded.fetch_add(1, Ordering::Relaxed) + 1;
        if count > self.budget {
            return Err(PlanError::HorizonTooLarge {
                budget: self.budget,
                actions: self.problem.actions().len(),
                horizon: self.horizon,
            });
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        for (i, &accel) in self.problem.actions().iter().enumerate() {
            if !self.problem.is_admissible(node, accel) {
                continue;
            }
            let (reward, child) = self.problem.stage(node, accel)?;
            let (tail_value, tail) = self.solve(&child, depth - 1)?;
            let value = reward + tail_value;
            if best.as_ref().is_none_or(|(b, _)| value > *b + TIE_TOLERANCE) {
                let mut seq = Vec::with_capacity(depth);
                seq.push(i);
                seq.extend(tail);
                best = Some((value, seq));
            }
        }
        let (value, seq) = best.expect("zero acceleration is always admissible");
        self.memo
            .entry(coarse)
            .or_default()
            .push(MemoEntry { exact, value, tail: seq.clone() });
        Ok((value, seq))
    }
}

/// Runs the DP, fanning the root actions out over the thread pool. Each root
/// child gets its own memo table so the result does not depend on scheduling.
fn run_search<P: Problem>(
    problem: &P,
    root: &P::Node,
    horizon: usize,
    budget: usize,
    parallelism: Parallelism,
) -> Result<(f64, Vec<usize>, usize), PlanError> {
    let expanded = AtomicUsize::new(1);
    let candidates: Vec<usize> = (0..problem.actions().len())
        .filter(|&i| problem.is_admissible(root, problem.actions()[i]))
        .collect();
    let evaluated = map_ordered(&candidates, parallelism, |&i| -> Result<(f64, Vec<usize>), PlanError> {
        let (reward, child) = problem.stage(root, problem.actions()[i])?;
        let mut search =
            Search { problem, memo: HashMap::new(), expanded: &expanded, budget, horizon };
        let (tail_value, tail) = search.solve(&child, horizon - 1)?;
        let mut seq = vec![i];
        seq.extend(tail);
        Ok((reward + tail_value, seq))
    });
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in evaluated {
        let (value, seq) = r?;
        if best.as_ref().is_none_or(|(b, _)| value > *b + TIE_TOLERANCE) {
            best = Some((value, seq));
        }
    }
    let (value, seq) = best.expect("zero acceleration is always admissible");
    Ok((value, seq, expanded.load(Ordering::Relaxed)))
}

impl Problem for ProbeProblem<'_> {
    type Node = ProbeNode;

    fn actions(&self) -> &[f64] {
        &self.ctx.actions
    }

    fn is_admissible(&self, node: &ProbeNode, accel: f64) -> bool {
        admissible(&Self::robot(node), accel, self.ctx.planner, self.ctx.planner.speed_cap(self.ctx.dynamics))
    }

    fn stage(&self, node: &ProbeNode, accel: f64) -> Result<(f64, ProbeNode), PlanError> {
        Ok(ProbeProblem::stage(self, node, accel)?)
    }

    fn keys(&self, node: &ProbeNode, depth: usize) -> (u64, u64) {
        ProbeProblem::keys(self, node, depth)
    }
}

fn probe_root(state: &JointState, belief: &Belief) -> ProbeNode {
    let branch = Branch { state: state.clone(), belief: belief.probabilities().to_vec(), jsd: 0.0 };
    ProbeNode { branches: vec![branch; belief.len()] }
}

/// Per-step breakdown of a probing rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrace {
    /// Belief-weighted stage rewards (JSD increment plus proximity penalty).
    pub stage_values: Vec<f64>,
    /// Belief-weighted JSD between the root belief and the predicted belief
    /// after each step; entry 0 is the root itself (always 0).
    pub expected_jsd: Vec<f64>,
    /// Belief-weighted proximity penalty of each step (already scaled).
    pub safety: Vec<f64>,
}

impl ProbeTrace {
    pub fn total(&self) -> f64 {
        self.stage_values.iter().sum()
    }
}

fn check_belief(model: &HumanUtilityModel, belief: &Belief) -> Result<(), PlanError> {
    if belief.len() != model.grid.len() {
        return Err(PlanError::BeliefMismatch { belief: belief.len(), grid: model.grid.len() });
    }
    Ok(())
}

/// Replays one robot acceleration sequence through the probing model.
pub fn evaluate_probe_sequence(
    state: &JointState,
    belief: &Belief,
    accels: &[f64],
    model: &HumanUtilityModel,
    dynamics: &DynamicsConfig,
    prediction: &PredictionModel,
    planner: &PlannerConfig,
) -> Result<ProbeTrace, PlanError> {
    check_belief(model, belief)?;
    let problem = ProbeProblem {
        ctx: Context { model, dynamics, prediction, planner, actions: Vec::new() },
        root_belief: belief.probabilities().to_vec(),
    };
    let mut node = probe_root(state, belief);
    let mut trace = ProbeTrace { stage_values: vec![], expected_jsd: vec![0.0], safety: vec![] };
    for &a in accels {
        let (reward, next) = ProbeProblem::stage(&problem, &node, a)?;
        let weighted = |f: &dyn Fn(&Branch) -> f64| -> f64 {
            next.branches.iter().zip(&problem.root_belief).map(|(b, w)| w * f(b)).sum()
        };
        trace.expected_jsd.push(weighted(&|b| b.jsd));
        trace.safety.push(weighted(&|b| problem.ctx.safety(&b.state)));
        trace.stage_values.push(reward);
        node = next;
    }
    Ok(trace)
}

/// Information-seeking plan: maximizes the belief-weighted terminal JSD plus
/// the weighted proximity penalty over the horizon.
pub fn probe_plan(
    state: &JointState,
    belief: &Belief,
    model: &HumanUtilityModel,
    dynamics: &DynamicsConfig,
    prediction: &PredictionModel,
    planner: &PlannerConfig,
) -> Result<PlanResult, PlanError> {
    if planner.objective != Objective::Probe {
        return Err(PlanError::WrongObjective(planner.objective));
    }
    check_belief(model, belief)?;
    let actions = action_priority(&dynamics.robot_accel_grid);
    let problem = ProbeProblem {
        ctx: Context { model, dynamics, prediction, planner, actions },
        root_belief: belief.probabilities().to_vec(),
    };
    let root = probe_root(state, belief);
    let (value, seq, explored) =
        run_search(&problem, &root, planner.horizon_steps, planner.node_budget, planner.parallelism)?;
    let accels: Vec<f64> = seq.iter().map(|&i| problem.ctx.actions[i]).collect();
    let trace = evaluate_probe_sequence(state, belief, &accels, model, dynamics, prediction, planner)?;
    Ok(PlanResult {
        controls: accels.into_iter().map(Control::accel).collect(),
        value,
        information: *trace.expected_jsd.last().unwrap_or(&0.0),
        explored_nodes: explored,
    })
}

// ---------------------------------------------------------------------------
// Influence

struct InfluenceProblem<'a> {
    ctx: Context<'a>,
    phi_hat: f64,
    reward: &'a dyn RobotReward,
}

impl Problem for InfluenceProblem<'_> {
    type Node = JointState;

    fn actions(&self) -> &[f64] {
        &self.ctx.actions
    }

    fn is_admissible(&self, node: &JointState, accel: f64) -> bool {
        admissible(&node.robot, accel, self.ctx.planner, self.ctx.planner.speed_cap(self.ctx.dynamics))
    }

    fn stage(&self, node: &JointState, accel: f64) -> Result<(f64, JointState), PlanError> {
        let next = self.ctx.advance(node, accel, self.phi_hat);
        let r = self.reward.reward(&next) + self.ctx.safety(&next);
        Ok((r, next))
    }

    fn keys(&self, node: &JointState, depth: usize) -> (u64, u64) {
        let mut coarse = DefaultHasher::new();
        let mut exact = DefaultHasher::new();
        depth.hash(&mut coarse);
        depth.hash(&mut exact);
        hash_state(node, &mut coarse, &mut exact);
        (coarse.finish(), exact.finish())
    }
}

/// Stage rewards of one robot acceleration sequence under the influence
/// model.
pub fn evaluate_influence_sequence(
    state: &JointState,
    phi_hat: f64,
    accels: &[f64],
    model: &HumanUtilityModel,
    dynamics: &DynamicsConfig,
    prediction: &PredictionModel,
    planner: &PlannerConfig,
    reward: &dyn RobotReward,
) -> Vec<f64> {
    let problem = InfluenceProblem {
        ctx: Context { model, dynamics, prediction, planner, actions: Vec::new() },
        phi_hat,
        reward,
    };
    let mut node = state.clone();
    accels
        .iter()
        .map(|&a| {
            let (r, next) = problem.stage(&node, a).expect("influence stage is infallible");
            node = next;
            r
        })
        .collect()
}

/// Plan that maximizes the robot reward plus the weighted proximity penalty,
/// with the human answering as a driver of type `phi_hat`.
#[allow(clippy::too_many_arguments)]
pub fn influence_plan(
    state: &JointState,
    phi_hat: f64,
    model: &HumanUtilityModel,
    dynamics: &DynamicsConfig,
    prediction: &PredictionModel,
    planner: &PlannerConfig,
    reward: &dyn RobotReward,
) -> Result<PlanResult, PlanError> {
    if planner.objective != Objective::Influence {
        return Err(PlanError::WrongObjective(planner.objective));
    }
    let actions = action_priority(&dynamics.robot_accel_grid);
    let problem = InfluenceProblem {
        ctx: Context { model, dynamics, prediction, planner, actions },
        phi_hat,
        reward,
    };
    let (value, seq, explored) =
        run_search(&problem, state, planner.horizon_steps, planner.node_budget, planner.parallelism)?;
    Ok(PlanResult {
        controls: seq.iter().map(|&i| Control::accel(problem.ctx.actions[i])).collect(),
        value,
        information: 0.0,
        explored_nodes: explored,
    })
}
