use dglight::baselines::RandomController;
use dglight::controller::{run_episode, Controller, EpisodeSpec};
use dglight::critic::{train_critic, CriticConfig, CriticController, FrozenCritic};
use dglight::sim::{build_grid, synthetic_flow, DemandProfile, FlowSpec, RoadNetwork, SignalPhase, SimState};

fn east_west_flow() -> FlowSpec {
    let net = RoadNetwork::grid(1, 1, 300.0).unwrap();
    let demand = DemandProfile {
        horizon: 3600.0,
        rate_east_west: 0.3,
        rate_north_south: 0.01,
        turn_left: 0.0,
        turn_right: 0.1,
    };
    synthetic_flow(&net, &demand, 7).unwrap()
}

fn env(flow: &FlowSpec) -> SimState {
    build_grid(1, 1, 300.0, flow, 0).unwrap()
}

#[test]
fn critic_learns_the_dominant_phase() {
    let flow = east_west_flow();
    let cfg = CriticConfig { buffer_capacity: 2000, sample_size: 500, seed: 1, ..CriticConfig::default() };
    let (params, log) = train_critic(&mut |_| Ok(env(&flow)), &cfg, 20).unwrap();
    assert_eq!(log.len(), 20);
    assert!(params.is_finite());
    let loss = |r: std::ops::Range<usize>| r.clone().map(|i| log[i].loss.unwrap()).sum::<f64>() / r.len() as f64;
    assert!(loss(15..20) < loss(0..5));
    assert!(log.iter().all(|r| r.loss.unwrap() >= 0.0));

    let critic = FrozenCritic::freeze(params, cfg);
    let mut greedy = CriticController(critic.clone());
    let mut state = env(&flow);
    let spec = EpisodeSpec::default();
    let mut etwt = 0;
    for d in 0..spec.decisions() {
        let joint = greedy.decide(&state, d).unwrap();
        etwt += joint.values().filter(|&&p| p == SignalPhase::Etwt).count();
        state.apply_actions(&joint).unwrap();
        state.advance_to_boundary();
    }
    assert!(etwt as f64 >= 0.8 * spec.decisions() as f64, "ETWT chosen {etwt} times");

    let random = run_episode(&mut env(&flow), &mut RandomController { seed: 0 }, spec).unwrap();
    assert!(state.metrics().att < random.att);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("critic.json");
    critic.save(&path).unwrap();
    let loaded = FrozenCritic::load(&path).unwrap();
    assert_eq!(loaded.params(), critic.params());
    let probe = env(&flow);
    assert_eq!(loaded.q_for_state(&probe).unwrap(), critic.q_for_state(&probe).unwrap());
}
