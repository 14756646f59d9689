//! Shared helpers for the integration tests: small random planning
//! instances and an exhaustive-enumeration oracle for both planners.
//!
//! The oracle re-implements the prediction model from scratch (human
//! lookahead, Boltzmann likelihoods, floored Bayes update, JSD, proximity
//! penalty) and scores every control sequence on its own. It covers the
//! configurations the generator produces: robot and human in one lane with
//! no other traffic.

#![allow(dead_code)]

pub mod invariants;

use active_probe::dynamics::DynamicsConfig;
use active_probe::inference::{HumanUtilityModel, SpeedReference, UtilityWeights};
use active_probe::model::{Belief, GridKind, HypothesisGrid, JointState, VehicleState, OUTER_LANE};
use active_probe::planning::{
    influence_plan, probe_plan, Objective, PlanResult, PlannerConfig, PredictionModel,
};
use active_probe::Parallelism;
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SmallInstance {
    pub state: JointState,
    pub belief: Belief,
    pub model: HumanUtilityModel,
    pub dynamics: DynamicsConfig,
    pub planner: PlannerConfig,
    /// Human type assumed by the influence planner.
    pub phi_hat: f64,
    /// Influence reward: `-(v_R - robot_target)^2 - 0.5 (v_H - human_target)^2`.
    pub robot_target: f64,
    pub human_target: f64,
}

impl SmallInstance {
    pub fn influence_reward(&self) -> impl Fn(&JointState) -> f64 + Sync + '_ {
        move |s: &JointState| -(s.robot.v - self.robot_target).powi(2) - 0.5 * (s.human.v - self.human_target).powi(2)
    }

    pub fn probe_planner(&self) -> PlannerConfig {
        PlannerConfig { objective: Objective::Probe, ..self.planner.clone() }
    }

    pub fn influence_planner(&self) -> PlannerConfig {
        PlannerConfig { objective: Objective::Influence, ..self.planner.clone() }
    }
}

fn grid_strategy() -> impl Strategy<Value = HypothesisGrid> {
    (1usize..=3, any::<bool>(), 0.0f64..1.0, 0.2f64..1.0).prop_map(|(n, velocity, base, step)| {
        let (kind, lo, span) = if velocity {
            (GridKind::DesiredVelocity, 15.0 + 10.0 * base, 4.0 * step)
        } else {
            (GridKind::DesiredHeadway, 15.0 + 50.0 * base, 30.0 * step)
        };
        HypothesisGrid::new(kind, (0..n).map(|k| lo + span * k as f64).collect()).unwrap()
    })
}

fn model_strategy() -> impl Strategy<Value = HumanUtilityModel> {
    (
        grid_strategy(),
        0.05f64..2.0,
        (0.5f64..2.0, 0.01f64..0.2, 0.0f64..2.0),
        (0.5f64..4.0, 1usize..=4, 0.0f64..2.0),
        any::<bool>(),
        18.0f64..22.0,
    )
        .prop_map(|(grid, beta, (speed, headway, safety), (lookahead, substeps, hold), leader, v_ref)| {
            let mut m = HumanUtilityModel::new(grid);
            m.rationality_beta = beta;
            m.weights = UtilityWeights { speed, headway, safety };
            m.lookahead = lookahead;
            m.lookahead_substeps = substeps;
            m.leader_hold = hold;
            m.speed_reference = if leader { SpeedReference::Leader } else { SpeedReference::Fixed };
            m.reference_velocity = v_ref;
            m
        })
}

fn dynamics_strategy() -> impl Strategy<Value = DynamicsConfig> {
    let robot = prop::sample::subsequence(vec![-2.0, -1.0, -0.5, 0.5, 1.0, 2.0], 1..=2);
    let human = prop::sample::select(vec![
        vec![-1.0, 0.0, 1.0],
        vec![-2.0, -1.0, 0.0, 1.0, 2.0],
        vec![-3.0, -1.5, -0.5, 0.0, 0.5, 1.0, 2.0],
    ]);
    (robot, human).prop_map(|(mut robot, human)| {
        robot.push(0.0);
        robot.sort_by(f64::total_cmp);
        DynamicsConfig { robot_accel_grid: robot, human_accel_grid: human, ..DynamicsConfig::default() }
    })
}

fn planner_strategy() -> impl Strategy<Value = PlannerConfig> {
    (
        1usize..=4,
        prop::sample::select(vec![0.5, 1.0]),
        prop::sample::select(vec![0.0, 0.5, 1.0]),
        1.0f64..10.0,
        prop::option::of(14.0f64..19.0),
        prop::option::of(20.0f64..26.0),
        any::<bool>(),
    )
        .prop_map(|(horizon, plan_dt, safety_weight, repeats, min_speed, max_speed, seq)| PlannerConfig {
            horizon_steps: horizon,
            plan_dt,
            safety_weight,
            evidence_repeats: repeats,
            min_speed: min_speed.unwrap_or(0.0),
            max_speed,
            parallelism: if seq { Parallelism::Sequential } else { Parallelism::Rayon },
            ..PlannerConfig::default()
        })
}

pub fn small_instance() -> impl Strategy<Value = SmallInstance> {
    (
        model_strategy(),
        dynamics_strategy(),
        planner_strategy(),
        (15.0f64..25.0, 15.0f64..25.0, 10.0f64..90.0),
        prop::collection::vec(0.01f64..1.0, 3),
        (0.0f64..1.0, 15.0f64..25.0, 15.0f64..25.0),
    )
        .prop_map(|(model, dynamics, planner, (v_r, v_h, headway), weights, (phi, rt, ht))| {
            let n = model.grid.len();
            let belief = Belief::normalize(&weights[..n]).unwrap();
            let values = model.grid.values();
            let phi_hat = values[0] + phi * (values[n - 1] - values[0]);
            SmallInstance {
                state: JointState {
                    robot: VehicleState::new(0.0, v_r, OUTER_LANE),
                    human: VehicleState::new(-headway, v_h, OUTER_LANE),
                    background: vec![],
                    time: 0.0,
                },
                belief,
                model,
                dynamics,
                planner,
                phi_hat,
                robot_target: rt,
                human_target: ht,
            }
        })
}

/// `count` instances from a fixed seed.
pub fn fixed_instances(count: usize) -> Vec<SmallInstance> {
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = small_instance();
    (0..count).map(|_| strategy.new_tree(&mut runner).unwrap().current()).collect()
}

// ---------------------------------------------------------------------------
// Independent model

fn euler(v: VehicleState, a: f64, dt: f64) -> VehicleState {
    VehicleState { x: v.x + v.v * dt, v: (v.v + a * dt).max(0.0), lane: v.lane }
}

/// Human utility of action `human_a` after the lookahead, for value `phi`.
fn utility(inst: &SmallInstance, s: &JointState, robot_a: f64, human_a: f64, phi: f64) -> f64 {
    let m = &inst.model;
    let robot_leads = s.robot.lane == s.human.lane && s.robot.x >= s.human.x;
    let dt = m.lookahead / m.lookahead_substeps as f64;
    let mut human = s.human;
    let mut robot = s.robot;
    for i in 0..m.lookahead_substeps {
        human = euler(human, human_a, dt);
        let a = if (i as f64 + 0.5) * dt < m.leader_hold { robot_a } else { 0.0 };
        robot = euler(robot, a, dt);
    }
    let gap = robot_leads.then_some(robot.x - human.x);
    let w = &m.weights;
    match m.grid.kind() {
        GridKind::DesiredVelocity => {
            let penalty = match gap {
                None => 0.0,
                Some(g) if g <= 0.0 => m.penalty_cap,
                Some(g) => (m.safety_distance / g).powi(2).min(m.penalty_cap),
            };
            -w.speed * (human.v - phi).powi(2) - w.safety * penalty
        }
        GridKind::DesiredHeadway => {
            let headway = gap.map_or(0.0, |g| w.headway * (g - phi).powi(2));
            let target = if m.speed_reference == SpeedReference::Leader && robot_leads {
                robot.v
            } else {
                m.reference_velocity
            };
            -headway - w.speed * (human.v - target).powi(2)
        }
    }
}

fn utilities(inst: &SmallInstance, s: &JointState, robot_a: f64, phi: f64) -> Vec<f64> {
    inst.dynamics.human_accel_grid.iter().map(|&h| utility(inst, s, robot_a, h, phi)).collect()
}

/// Utility argmax; ties go to the smaller magnitude, then the lower value.
fn best_action(grid: &[f64], u: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..grid.len() {
        let better = u[i] > u[best]
            || (u[i] == u[best] && (grid[i].abs(), grid[i]) < (grid[best].abs(), grid[best]));
        if better {
            best = i;
        }
    }
    best
}

fn log_probabilities(beta: f64, u: &[f64]) -> Vec<f64> {
    let max = u.iter().map(|x| beta * x).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = u.iter().map(|x| beta * x - max).collect();
    let log_z = shifted.iter().map(|x| x.exp()).sum::<f64>().ln();
    shifted.iter().map(|x| x - log_z).collect()
}

fn floored_bayes(prior: &[f64], ll: &[f64], repeats: f64) -> Vec<f64> {
    let logs: Vec<f64> = prior.iter().zip(ll).map(|(p, l)| p.ln() + repeats * l).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
    if p.iter().any(|&x| x < FLOOR) {
        for x in p.iter_mut() {
            *x = x.max(FLOOR);
        }
        let total: f64 = p.iter().sum();
        for x in p.iter_mut() {
            *x /= total;
        }
    }
    p
}

pub fn oracle_jsd(a: &[f64], b: &[f64]) -> f64 {
    let kl = |p: &[f64], q: &[f64]| -> f64 {
        p.iter().zip(q).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (2.0 * x / (x + y)).ln()).sum::<f64>()
    };
    0.5 * (kl(a, b) + kl(b, a))
}

fn proximity(inst: &SmallInstance, s: &JointState) -> f64 {
    let p = &inst.planner;
    if s.human.lane != s.robot.lane {
        return 0.0;
    }
    let gap = (s.human.x - s.robot.x).abs();
    let term = if gap <= 0.0 { p.safety_cap } else { (p.safe_distance / gap).powi(2).min(p.safety_cap) };
    -p.safety_weight * term
}

fn step(inst: &SmallInstance, s: &JointState, robot_a: f64, human_a: f64) -> JointState {
    let dt = inst.planner.plan_dt;
    JointState { robot: euler(s.robot, robot_a, dt), human: euler(s.human, human_a, dt), background: vec![], time: s.time + dt }
}

/// Stage values of one sequence under the probing objective.
pub fn oracle_probe_stages(inst: &SmallInstance, accels: &[f64]) -> Vec<f64> {
    let root = inst.belief.probabilities().to_vec();
    let values = inst.model.grid.values();
    let grid = &inst.dynamics.human_accel_grid;
    let n = root.len();
    let mut states = vec![inst.state.clone(); n];
    let mut beliefs = vec![root.clone(); n];
    let mut jsds = vec![0.0; n];
    let mut stages = Vec::new();
    for &a in accels {
        let mut reward = 0.0;
        for k in 0..n {
            let s = &states[k];
            let h = best_action(grid, &utilities(inst, s, a, values[k]));
            let ll: Vec<f64> = values
                .iter()
                .map(|&phi| log_probabilities(inst.model.rationality_beta, &utilities(inst, s, a, phi))[h])
                .collect();
            let belief = floored_bayes(&beliefs[k], &ll, inst.planner.evidence_repeats);
            let next = step(inst, s, a, grid[h]);
            let jsd = oracle_jsd(&root, &belief);
            reward += root[k] * (jsd - jsds[k] + proximity(inst, &next));
            states[k] = next;
            beliefs[k] = belief;
            jsds[k] = jsd;
        }
        stages.push(reward);
    }
    stages
}

pub fn oracle_influence_stages(inst: &SmallInstance, accels: &[f64]) -> Vec<f64> {
    let grid = &inst.dynamics.human_accel_grid;
    let reward = inst.influence_reward();
    let mut s = inst.state.clone();
    accels
        .iter()
        .map(|&a| {
            let h = best_action(grid, &utilities(inst, &s, a, inst.phi_hat));
            s = step(inst, &s, a, grid[h]);
            reward(&s) + proximity(inst, &s)
        })
        .collect()
}

/// Whether the robot speed stays inside the planner's band along `accels`
/// (zero acceleration is always allowed).
fn admissible(inst: &SmallInstance, accels: &[f64]) -> bool {
    let p = &inst.planner;
    let cap = p.max_speed.unwrap_or(f64::INFINITY).min(inst.dynamics.robot_speed_limit);
    let mut v = inst.state.robot.v;
    for &a in accels {
        let next = v + a * p.plan_dt;
        if (a > 0.0 && next > cap + 1e-9) || (a < 0.0 && next < p.min_speed - 1e-9) {
            return false;
        }
        v = next.max(0.0);
    }
    true
}

/// Sum of stage values in the same association as a backward recursion.
pub fn backward_sum(stages: &[f64]) -> f64 {
    stages.iter().rev().fold(0.0, |acc, r| r + acc)
}

/// Best sequence over all admissible sequences, enumerated in tie-break
/// order (actions by magnitude, then value; first position most
/// significant). A later sequence wins only if better by more than 1e-12.
pub fn enumerate_best(inst: &SmallInstance, score: impl Fn(&[f64]) -> Vec<f64>) -> (f64, Vec<f64>) {
    let mut actions = inst.dynamics.robot_accel_grid.clone();
    actions.sort_by(|a, b| (a.abs(), *a).partial_cmp(&(b.abs(), *b)).unwrap());
    let t = inst.planner.horizon_steps;
    let total = actions.len().pow(t as u32);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..total {
        let mut seq = vec![0.0; t];
        let mut c = code;
        for slot in seq.iter_mut().rev() {
            *slot = actions[c % actions.len()];
            c /= actions.len();
        }
        if !admissible(inst, &seq) {
            continue;
        }
        let value = backward_sum(&score(&seq));
        if best.as_ref().is_none_or(|(b, _)| value > b + 1e-12) {
            best = Some((value, seq));
        }
    }
    best.expect("the all-zero sequence is admissible")
}

/// Planner result vs oracle: value within 1e-12 and identical controls.
pub fn compare(plan: &PlanResult, oracle: &(f64, Vec<f64>)) -> Result<(), String> {
    let controls: Vec<f64> = plan.controls.iter().map(|c| c.accel).collect();
    if (plan.value - oracle.0).abs() > 1e-12 {
        return Err(format!("value {} vs oracle {}", plan.value, oracle.0));
    }
    if controls != oracle.1 {
        return Err(format!("controls {controls:?} vs oracle {:?}", oracle.1));
    }
    Ok(())
}

/// Runs both planners on `inst` and checks them against the oracle.
pub fn check_against_oracle(inst: &SmallInstance) -> Result<(), String> {
    let prediction = PredictionModel::default();
    let probe = probe_plan(&inst.state, &inst.belief, &inst.model, &inst.dynamics, &prediction, &inst.probe_planner())
        .map_err(|e| e.to_string())?;
    compare(&probe, &enumerate_best(inst, |s| oracle_probe_stages(inst, s))).map_err(|e| format!("probe: {e}"))?;
    let reward = inst.influence_reward();
    let influence = influence_plan(
        &inst.state,
        inst.phi_hat,
        &inst.model,
        &inst.dynamics,
        &prediction,
        &inst.influence_planner(),
        &reward,
    )
    .map_err(|e| e.to_string())?;
    compare(&influence, &enumerate_best(inst, |s| oracle_influence_stages(inst, s)))
        .map_err(|e| format!("influence: {e}"))
}
