//! Property checks shared by the property-test target and the acceptance
//! run. Each invariant drives its own proptest runner from a fixed seed.

use std::f64::consts::LN_2;

use active_probe::divergence::{jsd, kl_to_mixture};
use active_probe::dynamics::{idm_accel, joint_step, IdmParams};
use active_probe::inference::{belief_update, boltzmann_likelihood, log_softmax, posterior_from_log_likelihoods};
use active_probe::model::{Belief, Control, GridKind, HypothesisGrid, VehicleState, PROBABILITY_FLOOR};
use active_probe::planning::{
    best_response, evaluate_influence_sequence, evaluate_probe_sequence, influence_plan, probe_plan, PredictionModel,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use super::{backward_sum, oracle_jsd, small_instance, SmallInstance};

pub const DEFAULT_CASES: u32 = 1000;

pub struct Invariant {
    pub name: &'static str,
    pub check: fn(&mut TestRunner) -> Result<(), String>,
}

pub fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    runner: &mut TestRunner,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(TestCaseError::fail(format!($($fmt)+)));
        }
    };
}

fn weight() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 1e-20f64..1e-10, 0.0f64..1.0, 1.0f64..1e3]
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(weight(), n).prop_map(|mut w| {
        if w.iter().all(|&x| x == 0.0) {
            w[0] = 1.0;
        }
        w
    })
}

fn belief_pair() -> impl Strategy<Value = (Belief, Belief)> {
    (2usize..=30).prop_flat_map(|n| (weights(n), weights(n))).prop_map(|(a, b)| {
        (Belief::normalize(&a).unwrap(), Belief::normalize(&b).unwrap())
    })
}

fn jsd_bounded(r: &mut TestRunner) -> Result<(), String> {
    run(r, belief_pair(), |(a, b)| {
        let d = jsd(&a, &b).unwrap();
        ensure!((0.0..=LN_2).contains(&d), "jsd {d} outside [0, ln 2]");
        let oracle = oracle_jsd(a.probabilities(), b.probabilities());
        ensure!((d - oracle).abs() <= 1e-12, "jsd {d} vs direct sum {oracle}");
        ensure!(jsd(&a, &a).unwrap() == 0.0, "jsd(a, a) is not zero");
        Ok(())
    })
}

fn jsd_symmetric(r: &mut TestRunner) -> Result<(), String> {
    run(r, belief_pair(), |(a, b)| {
        let (ab, ba) = (jsd(&a, &b).unwrap(), jsd(&b, &a).unwrap());
        ensure!((ab - ba).abs() <= 1e-12, "jsd(a,b) = {ab}, jsd(b,a) = {ba}");
        Ok(())
    })
}

fn kl_mixture_bound(r: &mut TestRunner) -> Result<(), String> {
    run(r, belief_pair(), |(a, b)| {
        let kl = kl_to_mixture(&a, &b).unwrap();
        let sup = a.max();
        let inf = a.probabilities().iter().zip(b.probabilities()).map(|(x, y)| x + y).fold(f64::INFINITY, f64::min);
        let bound = (2.0 * sup).ln() - inf.ln();
        ensure!(kl <= bound + 1e-12, "kl {kl} above bound {bound}");
        ensure!(kl < LN_2 + 1e-15, "kl {kl} not below ln 2");
        Ok(())
    })
}

fn normalization(r: &mut TestRunner) -> Result<(), String> {
    run(r, (1usize..=30).prop_flat_map(weights), |w| {
        let b = Belief::normalize(&w).unwrap();
        let sum: f64 = b.probabilities().iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-9, "sum {sum}");
        ensure!(b.min() > 0.0, "nonpositive entry");
        ensure!(b.min() >= PROBABILITY_FLOOR * (1.0 - 1e-9), "entry {} below the floor", b.min());
        let again = Belief::normalize(b.probabilities()).unwrap();
        for (x, y) in b.probabilities().iter().zip(again.probabilities()) {
            ensure!((x - y).abs() <= 1e-12, "not idempotent: {x} vs {y}");
        }
        Ok(())
    })
}

fn observed_sequence() -> impl Strategy<Value = (SmallInstance, Vec<(f64, f64)>)> {
    (small_instance(), prop::collection::vec((-3.5f64..2.5, -2.0f64..2.0), 1..20))
}

fn filtered_beliefs_stay_valid(r: &mut TestRunner) -> Result<(), String> {
    run(r, observed_sequence(), |(inst, obs)| {
        let mut belief = inst.belief.clone();
        let mut state = inst.state.clone();
        for (h, a) in obs {
            let robot_u = Control::accel(a);
            let human_u = Control::accel(h);
            belief = belief_update(&belief, &state, &robot_u, &human_u, &inst.model, &inst.dynamics.human_accel_grid)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let sum: f64 = belief.probabilities().iter().sum();
            ensure!((sum - 1.0).abs() <= 1e-9 && belief.min() > 0.0, "invalid belief {:?}", belief);
            let next = joint_step(&state, &robot_u, &human_u, &[], 0.1);
            if next.robot.x - next.human.x > 1.0 {
                state = next;
            }
        }
        Ok(())
    })
}

fn likelihood_in_open_interval(r: &mut TestRunner) -> Result<(), String> {
    run(r, (small_instance(), any::<prop::sample::Index>(), any::<prop::sample::Index>(), -2.0f64..2.0), |(inst, h, k, a)| {
        let grid = &inst.dynamics.human_accel_grid;
        let human_u = Control::accel(grid[h.index(grid.len())]);
        let phi = k.index(inst.model.grid.len());
        let p = boltzmann_likelihood(&inst.state, &Control::accel(a), &human_u, phi, &inst.model, grid).unwrap();
        ensure!(p > 0.0 && p < 1.0, "likelihood {p}");
        Ok(())
    })
}

fn posterior_order(r: &mut TestRunner) -> Result<(), String> {
    let s = (2usize..=30).prop_flat_map(|n| (weights(n), prop::collection::vec(-30.0f64..0.0, n)));
    run(r, s, |(w, ll)| {
        let prior = Belief::normalize(&w).unwrap();
        let p = prior.probabilities();
        let mut post = vec![0.0; p.len()];
        posterior_from_log_likelihoods(p, &ll, 1.0, &mut post).unwrap();
        for i in 0..p.len() {
            for j in 0..p.len() {
                // The floor caps how far a ratio can move, so only entries
                // it does not touch are compared.
                let floored = |x: f64| x <= PROBABILITY_FLOOR * 1.01;
                if ll[i] > ll[j] + 1e-9 && !floored(post[i]) && !floored(post[j]) {
                    let before = p[i] / p[j];
                    let after = post[i] / post[j];
                    ensure!(after > before, "ratio {before} -> {after}");
                }
            }
        }
        Ok(())
    })
}

fn softmax_shift_invariance(r: &mut TestRunner) -> Result<(), String> {
    let rows = (2usize..=15, 1usize..=30).prop_flat_map(|(m, n)| {
        (
            prop::collection::vec(prop::collection::vec(-50.0f64..50.0, m), n),
            prop::collection::vec(-100.0f64..100.0, n),
            0.01f64..5.0,
            weights(n),
            0..m,
        )
    });
    run(r, rows, |(utilities, shifts, beta, prior, action)| {
        let prior = Belief::normalize(&prior).unwrap();
        let mut ll = Vec::new();
        let mut ll_shifted = Vec::new();
        for (row, c) in utilities.iter().zip(&shifts) {
            let mut plain = row.clone();
            let mut shifted: Vec<f64> = row.iter().map(|u| u + c).collect();
            log_softmax(beta, &mut plain);
            log_softmax(beta, &mut shifted);
            for (x, y) in plain.iter().zip(&shifted) {
                ensure!((x.exp() - y.exp()).abs() <= 1e-12, "probability {} vs {}", x.exp(), y.exp());
            }
            ll.push(plain[action]);
            ll_shifted.push(shifted[action]);
        }
        let n = prior.len();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        posterior_from_log_likelihoods(prior.probabilities(), &ll, 1.0, &mut a).unwrap();
        posterior_from_log_likelihoods(prior.probabilities(), &ll_shifted, 1.0, &mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            ensure!((x - y).abs() <= 1e-12, "posterior {x} vs {y}");
        }
        Ok(())
    })
}

fn idm_params() -> impl Strategy<Value = IdmParams> {
    (0.1f64..3.0, 0.5f64..4.0, 5.0f64..40.0, 0.5f64..3.0, 0.5f64..10.0)
        .prop_map(|(u_max, b_pref, v_des, tau_gap, d_min)| IdmParams { u_max, b_pref, v_des, tau_gap, d_min })
}

fn idm_equilibria(r: &mut TestRunner) -> Result<(), String> {
    run(r, idm_params(), |p| {
        let cruising = idm_accel(&VehicleState::new(0.0, p.v_des, 0), None, &p).unwrap();
        ensure!(cruising == 0.0, "free-road equilibrium {cruising}");
        let leader = VehicleState::new(p.d_min, 0.0, 0);
        let standing = idm_accel(&VehicleState::new(0.0, 0.0, 0), Some(&leader), &p).unwrap();
        ensure!(standing == 0.0, "standstill equilibrium {standing}");
        Ok(())
    })
}

fn idm_shape(r: &mut TestRunner) -> Result<(), String> {
    let s = (idm_params(), 0.0f64..1.0, 0.0f64..1.0, 0.1f64..500.0, 0.0f64..40.0, 50.0f64..2000.0);
    run(r, s, |(p, f1, f2, gap, v_lead, far)| {
        let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
        let leader = VehicleState::new(gap, v_lead, 0);
        let a = idm_accel(&VehicleState::new(0.0, hi * p.v_des * 1.5, 0), Some(&leader), &p).unwrap();
        ensure!(a <= p.u_max, "accel {a} above u_max {}", p.u_max);
        // Free road and a leader pacing the follower: slower is never
        // less eager.
        let (v1, v2) = (lo * p.v_des, hi * p.v_des);
        let free1 = idm_accel(&VehicleState::new(0.0, v1, 0), None, &p).unwrap();
        let free2 = idm_accel(&VehicleState::new(0.0, v2, 0), None, &p).unwrap();
        ensure!(free1 >= free2, "free road {free1} < {free2}");
        let paced1 = idm_accel(&VehicleState::new(0.0, v1, 0), Some(&VehicleState::new(far, v1, 0)), &p).unwrap();
        let paced2 = idm_accel(&VehicleState::new(0.0, v2, 0), Some(&VehicleState::new(far, v2, 0)), &p).unwrap();
        ensure!(paced1 >= paced2, "paced {paced1} < {paced2}");
        Ok(())
    })
}

fn joint_step_affine(r: &mut TestRunner) -> Result<(), String> {
    let s = (small_instance(), (-3.0f64..2.0, -3.0f64..2.0), (-3.0f64..2.0, -3.0f64..2.0));
    run(r, s, |(inst, (r1, r2), (h1, h2))| {
        let s = &inst.state;
        for alpha in [0.0, 0.5, 1.0] {
            let mix = |a: f64, b: f64| alpha * a + (1.0 - alpha) * b;
            let combined = joint_step(s, &Control::accel(mix(r1, r2)), &Control::accel(mix(h1, h2)), &[], 0.1);
            let one = joint_step(s, &Control::accel(r1), &Control::accel(h1), &[], 0.1);
            let two = joint_step(s, &Control::accel(r2), &Control::accel(h2), &[], 0.1);
            for (c, a, b) in [(combined.robot, one.robot, two.robot), (combined.human, one.human, two.human)] {
                ensure!((c.x - mix(a.x, b.x)).abs() <= 1e-12, "position not affine");
                ensure!((c.v - mix(a.v, b.v)).abs() <= 1e-12, "velocity not affine");
            }
        }
        Ok(())
    })
}

fn grid_monotone(r: &mut TestRunner) -> Result<(), String> {
    let s = (1usize..=40, -50.0f64..50.0, 0.01f64..20.0, any::<bool>());
    run(r, s, |(n, lo, step, velocity)| {
        let kind = if velocity { GridKind::DesiredVelocity } else { GridKind::DesiredHeadway };
        let grid = HypothesisGrid::new(kind, (0..n).map(|k| lo + step * k as f64).collect()).unwrap();
        for g in [grid, HypothesisGrid::lane_advise_velocity(), HypothesisGrid::gap_create_headway()] {
            for i in 1..g.len() {
                ensure!(g.grid_value(i).unwrap() < g.grid_value(i + 1).unwrap(), "grid not increasing at {i}");
            }
            ensure!(g.grid_value(0).is_err() && g.grid_value(g.len() + 1).is_err(), "index range not enforced");
        }
        Ok(())
    })
}

fn random_sequence() -> impl Strategy<Value = (SmallInstance, Vec<prop::sample::Index>)> {
    (small_instance(), prop::collection::vec(any::<prop::sample::Index>(), 4))
}

fn telescoping(r: &mut TestRunner) -> Result<(), String> {
    run(r, random_sequence(), |(inst, picks)| {
        let grid = &inst.dynamics.robot_accel_grid;
        let accels: Vec<f64> =
            picks.iter().take(inst.planner.horizon_steps).map(|i| grid[i.index(grid.len())]).collect();
        let trace = evaluate_probe_sequence(
            &inst.state,
            &inst.belief,
            &accels,
            &inst.model,
            &inst.dynamics,
            &PredictionModel::default(),
            &inst.probe_planner(),
        )
        .unwrap();
        let increments: f64 = trace.stage_values.iter().zip(&trace.safety).map(|(v, s)| v - s).sum();
        let terminal = *trace.expected_jsd.last().unwrap();
        ensure!((increments - terminal).abs() <= 1e-9, "sum of increments {increments} vs terminal {terminal}");
        for t in 0..accels.len() {
            let step = trace.stage_values[t] - trace.safety[t];
            let diff = trace.expected_jsd[t + 1] - trace.expected_jsd[t];
            ensure!((step - diff).abs() <= 1e-9, "step {t}: {step} vs {diff}");
        }
        Ok(())
    })
}

fn bellman_split(r: &mut TestRunner) -> Result<(), String> {
    run(r, small_instance(), |inst| {
        let prediction = PredictionModel::default();
        let planner = inst.influence_planner();
        let reward = inst.influence_reward();
        let plan =
            influence_plan(&inst.state, inst.phi_hat, &inst.model, &inst.dynamics, &prediction, &planner, &reward)
                .unwrap();
        let accels: Vec<f64> = plan.controls.iter().map(|c| c.accel).collect();
        let stages = evaluate_influence_sequence(
            &inst.state,
            inst.phi_hat,
            &accels,
            &inst.model,
            &inst.dynamics,
            &prediction,
            &planner,
            &reward,
        );
        ensure!((plan.value - backward_sum(&stages)).abs() <= 1e-9, "value {} vs stages", plan.value);
        let t = accels.len();
        let mut state = inst.state.clone();
        for k in 1..t {
            let robot_u = Control::accel(accels[k - 1]);
            let human_u = best_response(&state, &robot_u, inst.phi_hat, &inst.model, &inst.dynamics.human_accel_grid);
            state = joint_step(&state, &robot_u, &human_u, &[], planner.plan_dt);
            let tail_planner = active_probe::planning::PlannerConfig { horizon_steps: t - k, ..planner.clone() };
            let tail =
                influence_plan(&state, inst.phi_hat, &inst.model, &inst.dynamics, &prediction, &tail_planner, &reward)
                    .unwrap();
            let head: f64 = stages[..k].iter().sum();
            ensure!(
                (plan.value - (head + tail.value)).abs() <= 1e-9,
                "split at {k}: {} vs {} + {}",
                plan.value,
                head,
                tail.value
            );
        }

        let probe = probe_plan(
            &inst.state,
            &inst.belief,
            &inst.model,
            &inst.dynamics,
            &prediction,
            &inst.probe_planner(),
        )
        .unwrap();
        let accels: Vec<f64> = probe.controls.iter().map(|c| c.accel).collect();
        let trace = evaluate_probe_sequence(
            &inst.state,
            &inst.belief,
            &accels,
            &inst.model,
            &inst.dynamics,
            &prediction,
            &inst.probe_planner(),
        )
        .unwrap();
        for k in 0..=accels.len() {
            let split = trace.stage_values[..k].iter().sum::<f64>() + trace.stage_values[k..].iter().sum::<f64>();
            ensure!((probe.value - split).abs() <= 1e-9, "probe split at {k}");
        }
        Ok(())
    })
}

fn probe_value_bounds(r: &mut TestRunner) -> Result<(), String> {
    run(r, small_instance(), |inst| {
        let prediction = PredictionModel::default();
        let planner = inst.probe_planner();
        let plan =
            probe_plan(&inst.state, &inst.belief, &inst.model, &inst.dynamics, &prediction, &planner).unwrap();
        let zeros = vec![0.0; planner.horizon_steps];
        let idle =
            evaluate_probe_sequence(&inst.state, &inst.belief, &zeros, &inst.model, &inst.dynamics, &prediction, &planner)
                .unwrap();
        ensure!(plan.value >= idle.total() - 1e-12, "plan {} below idle {}", plan.value, idle.total());
        ensure!((0.0..=LN_2).contains(&plan.information), "information {}", plan.information);
        ensure!(plan.value <= LN_2, "value {} above ln 2", plan.value);
        Ok(())
    })
}

pub fn all() -> Vec<Invariant> {
    vec![
        Invariant { name: "jsd within [0, ln 2]", check: jsd_bounded },
        Invariant { name: "jsd symmetry", check: jsd_symmetric },
        Invariant { name: "kl-to-mixture bound", check: kl_mixture_bound },
        Invariant { name: "belief normalization and positivity", check: normalization },
        Invariant { name: "filtered beliefs stay valid", check: filtered_beliefs_stay_valid },
        Invariant { name: "likelihood in (0, 1)", check: likelihood_in_open_interval },
        Invariant { name: "posterior order preservation", check: posterior_order },
        Invariant { name: "softmax shift invariance", check: softmax_shift_invariance },
        Invariant { name: "idm equilibria exactly zero", check: idm_equilibria },
        Invariant { name: "idm bounded and monotone", check: idm_shape },
        Invariant { name: "joint step affine in controls", check: joint_step_affine },
        Invariant { name: "grid values increasing", check: grid_monotone },
        Invariant { name: "telescoping identity", check: telescoping },
        Invariant { name: "bellman split additivity", check: bellman_split },
        Invariant { name: "probe value bounds", check: probe_value_bounds },
    ]
}
