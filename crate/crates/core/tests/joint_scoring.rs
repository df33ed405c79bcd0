use std::collections::BTreeMap;

use dglight::jsgrpo::{collect_jsgrpo_episode, evaluate_candidate, mixed_reward, InteriorMode, JointCandidate, JsConfig};
use dglight::policy::{MockPolicy, MockPolicyParams, SamplingParams};
use dglight::rollout::RolloutConfig;
use dglight::sim::{build_grid, synthetic_flow, DemandProfile, FlowSpec, RoadNetwork, SignalPhase, SimState};
use dglight::Tensor;

fn peaked(phase: SignalPhase) -> MockPolicy {
    let mut bias = [-30.0; 4];
    bias[phase.index()] = 30.0;
    let params = MockPolicyParams { bias: Tensor::new(vec![1, 4], bias.to_vec()).unwrap(), ..MockPolicyParams::default() };
    MockPolicy { params, sampling: SamplingParams::default() }
}

fn uniform() -> MockPolicy {
    MockPolicy { params: MockPolicyParams::default(), sampling: SamplingParams::default() }
}

fn busy_grid(rows: usize, cols: usize, seed: u64) -> SimState {
    let net = RoadNetwork::grid(rows, cols, 300.0).unwrap();
    let flow = synthetic_flow(&net, &DemandProfile::uniform(3600.0, 0.1), seed).unwrap();
    build_grid(rows, cols, 300.0, &flow, seed).unwrap()
}

fn joint(state: &SimState, phase: Option<SignalPhase>) -> JointCandidate {
    let net = state.network();
    let actions = net.real_intersections().iter().map(|&n| (net.node_id(n).to_string(), phase)).collect();
    JointCandidate { index: 1, actions }
}

/// One vehicle held at a red left-turn stop line; nothing else on the network.
fn stuck_vehicle() -> SimState {
    let mut s = build_grid(1, 1, 300.0, &FlowSpec::default(), 0).unwrap();
    s.place_vehicle(
        &["intersection_1_2->intersection_1_1:left", "intersection_1_1->intersection_2_1:exit"],
        300.0,
        0.0,
    )
    .unwrap();
    s
}

#[test]
fn unit_queue_over_three_intervals_returns_minus_2_44() {
    let s = stuck_vehicle();
    let cfg = JsConfig { alpha: 1.0, beta: 0.0, ..JsConfig::h3() };
    let g = evaluate_candidate(&s.snapshot(), &joint(&s, Some(SignalPhase::Etwt)), &mut peaked(SignalPhase::Etwt), &cfg, 0)
        .unwrap();
    assert_eq!(g, -2.44);
}

#[test]
fn single_interval_return_is_the_first_reward() {
    let mut s = busy_grid(2, 2, 1);
    for _ in 0..4 {
        let j = dglight::baselines::max_pressure_joint(&s).unwrap();
        s.apply_actions(&j).unwrap();
        s.advance_to_boundary();
    }
    let snap = s.snapshot();
    let cand = joint(&s, Some(SignalPhase::Ntst));
    let mut fork = snap.restore();
    let action = dglight::jsgrpo::resolve_joint(&fork, &cand).unwrap();
    fork.apply_actions(&action).unwrap();
    fork.advance_to_boundary();
    let r = mixed_reward(&fork, 0.6, 0.3).unwrap();
    let h1 = JsConfig { horizon: 1, ..JsConfig::default() };
    assert_eq!(evaluate_candidate(&snap, &cand, &mut uniform(), &h1, 3).unwrap(), r);
    let g0 = JsConfig { gamma: 0.0, ..JsConfig::h6() };
    assert_eq!(evaluate_candidate(&snap, &cand, &mut uniform(), &g0, 3).unwrap(), r);
    assert!(r < 0.0);
}

#[test]
fn forks_leave_the_parent_untouched() {
    let s = busy_grid(2, 2, 2);
    let mut s = s;
    for _ in 0..3 {
        let j = dglight::baselines::max_pressure_joint(&s).unwrap();
        s.apply_actions(&j).unwrap();
        s.advance_to_boundary();
    }
    let snap = s.snapshot();
    let before = mixed_reward(snap.state(), 0.6, 0.3).unwrap();
    let cfg = JsConfig::h3();
    let first = evaluate_candidate(&snap, &joint(&s, None), &mut uniform(), &cfg, 5).unwrap();
    for p in SignalPhase::ALL {
        evaluate_candidate(&snap, &joint(&s, Some(p)), &mut uniform(), &cfg, 6).unwrap();
    }
    assert_eq!(evaluate_candidate(&snap, &joint(&s, None), &mut uniform(), &cfg, 5).unwrap(), first);
    assert_eq!(mixed_reward(snap.state(), 0.6, 0.3).unwrap(), before);
    assert_eq!(snap.state().clock(), s.clock());
}

#[test]
fn joint_scoring_episode_records_are_self_consistent() {
    let mut env = busy_grid(1, 2, 3);
    let cfg = RolloutConfig { episode: 600, ..RolloutConfig::default() };
    let js = JsConfig { interior: InteriorMode::MaxPressure, ..JsConfig::h3() };
    let out = collect_jsgrpo_episode(&mut env, &mut uniform(), &cfg, &js).unwrap();
    assert_eq!(out.records.len(), 20 * 2);
    for r in &out.records {
        assert!(r.is_consistent(cfg.r_invalid));
        assert_eq!(r.joint_scoring, Some(js.scoring()));
        let proposed: BTreeMap<SignalPhase, ()> = r.candidates.iter().filter_map(|c| c.parse.phase()).map(|p| (p, ())).collect();
        for p in SignalPhase::ALL {
            if !proposed.contains_key(&p) {
                assert_eq!(r.q_values[p], js.fallback);
            }
        }
    }
}

#[test]
fn joint_scoring_is_deterministic() {
    let run = || {
        let mut env = busy_grid(1, 2, 4);
        let cfg = RolloutConfig { episode: 300, seed: 2, ..RolloutConfig::default() };
        collect_jsgrpo_episode(&mut env, &mut uniform(), &cfg, &JsConfig::h3()).unwrap()
    };
    assert_eq!(run(), run());
}
