//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use dglight::baselines::{FixedTimeController, FixedTimePlan, MaxPressureController, RandomController};
use dglight::controller::{run_episode, Controller, EpisodeSpec};
use dglight::critic::{
    bellman_loss_with_targets, bellman_targets, epsilon, intersection_reward, train_critic, CriticConfig,
    CriticController, CriticParams, FrozenCritic, Transition,
};
use dglight::grpo::{
    build_groups, group_advantages, grpo_step, reward_lookup, surrogate_with_gradient, train_grpo, Group, GrpoConfig,
    GrpoOptimizer,
};
use dglight::jsgrpo::{evaluate_candidate, mixed_reward, project_scores, JointCandidate, JsConfig};
use dglight::numerics::finite_diff_check;
use dglight::policy::{mock_generate, policy_features, MockPolicy, MockPolicyParams, SamplingParams};
use dglight::prompting::{appendix_fixture, parse_response, render_prompt, ParseResult, DEFAULT_TASK};
use dglight::critic::QVector;
use dglight::rollout::{collect_episode, persist_records, score_candidates, Candidate, PolicyController, RolloutConfig, RolloutRecord};
use dglight::sim::{build_grid, synthetic_flow, DemandProfile, FlowSpec, RoadNetwork, SignalPhase, SimState};
use dglight::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: &str = include_str!("../fixtures/prompts/appendix_state.txt");
const TRACE: &str = include_str!("../fixtures/responses/reasoning_trace_etwt.txt");
const Q: QVector = QVector([0.4, -0.2, 0.1, 0.0]);

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn grid_state(rows: usize, cols: usize, rate: f64, seed: u64) -> SimState {
    let net = RoadNetwork::grid(rows, cols, 300.0).unwrap();
    let flow = synthetic_flow(&net, &DemandProfile::uniform(3600.0, rate), seed).unwrap();
    build_grid(rows, cols, 300.0, &flow, seed).unwrap()
}

fn att(state: SimState, c: &mut dyn Controller) -> f64 {
    let mut s = state;
    run_episode(&mut s, c, EpisodeSpec::default()).unwrap().att
}

fn controller_ordering() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let mp = att(grid_state(3, 4, 0.1, seed), &mut MaxPressureController);
        let ft = att(grid_state(3, 4, 0.1, seed), &mut FixedTimeController(FixedTimePlan::default()));
        let rnd = att(grid_state(3, 4, 0.1, seed), &mut RandomController { seed });
        pass &= mp * 1.05 <= ft && ft * 1.05 <= rnd;
        details.push(format!("seed {seed}: MP {mp:.1} < FT {ft:.1} < Random {rnd:.1}"));
    }
    check(pass, details.join("; "))
}

fn critic_learning() -> Outcome {
    let net = RoadNetwork::grid(1, 1, 300.0).unwrap();
    let demand = DemandProfile { horizon: 3600.0, rate_east_west: 0.2, rate_north_south: 0.04, turn_left: 0.1, turn_right: 0.1 };
    let flow = synthetic_flow(&net, &demand, 7).unwrap();
    let env = || build_grid(1, 1, 300.0, &flow, 0).unwrap();
    let cfg = CriticConfig { buffer_capacity: 2000, sample_size: 500, seed: 1, ..CriticConfig::default() };
    let (params, log) = train_critic(&mut |_| Ok(env()), &cfg, 20).unwrap();
    let mean_loss = |r: std::ops::Range<usize>| r.clone().filter_map(|i| log[i].loss).sum::<f64>() / r.len() as f64;
    let (early, late) = (mean_loss(0..5), mean_loss(15..20));
    let greedy = att(env(), &mut CriticController(FrozenCritic::freeze(params, cfg)));
    let random = (0..3).map(|s| att(env(), &mut RandomController { seed: s })).sum::<f64>() / 3.0;
    check(
        greedy <= 0.8 * random && late < 0.5 * early,
        format!("greedy ATT {greedy:.1} vs random {random:.1} (bound {:.1}); loss {early:.3} -> {late:.3}", 0.8 * random),
    )
}

fn gradient_checks() -> Outcome {
    let cfg = CriticConfig { embed_dim: 4, heads: 2, head_dim: 2, q_hidden: 3, ..CriticConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = CriticParams::init(&cfg, &mut rng);
    let target = CriticParams::init(&cfg, &mut rng);
    let feat = |rng: &mut ChaCha8Rng| {
        let mut f = [0.0; 36];
        for v in f.iter_mut().take(32) {
            *v = rng.gen_range(0..4) as f64;
        }
        f[32 + rng.gen_range(0..4)] = 1.0;
        f
    };
    let batch: Vec<Transition> = (0..2)
        .map(|_| Transition {
            state: (0..3).map(|_| feat(&mut rng)).collect(),
            actions: (0..3).map(|_| SignalPhase::ALL[rng.gen_range(0..4)]).collect(),
            rewards: (0..3).map(|_| -0.25 * rng.gen_range(0..8) as f64).collect(),
            next_state: (0..3).map(|_| feat(&mut rng)).collect(),
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let nb = vec![vec![1], vec![0, 2], vec![1]];
    let targets = bellman_targets(&target, &cfg, &refs, &nb).unwrap();
    let flatten = |p: &BTreeMap<String, Tensor>| Tensor::vector(p.values().flat_map(|t| t.values().to_vec()).collect());
    let unflatten = |flat: &Tensor| {
        let mut out = params.clone();
        let mut at = 0;
        for t in out.params.values_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat.values()[at..at + n]);
            at += n;
        }
        out
    };
    let bellman = finite_diff_check(
        |flat: &Tensor| {
            let (l, g) = bellman_loss_with_targets(&unflatten(flat), &cfg, &refs, &targets, &nb).unwrap();
            (l, flatten(&g))
        },
        &flatten(&params.params),
        1e-5,
    );

    let mk = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MockPolicyParams {
            weights: Tensor::new(vec![36, 4], (0..144).map(|_| rng.gen_range(-0.05..0.05)).collect()).unwrap(),
            bias: Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap(),
            ..MockPolicyParams::default()
        }
    };
    let (old, current) = (mk(3), mk(4));
    let prompt = render_prompt(&appendix_fixture(), DEFAULT_TASK).text;
    let f = policy_features(&prompt).unwrap();
    let gcfg = GrpoConfig::default();
    let mut group = Group::new(prompt, mock_generate(&old, &f, 4, &SamplingParams::default(), 9), &Q, &gcfg).unwrap();
    group.advantages = vec![1.2, -0.7, 0.4, -0.9];
    let groups = [group];
    let mut start = current.weights.values().to_vec();
    start.extend_from_slice(current.bias.values());
    let surrogate = finite_diff_check(
        |flat: &Tensor| {
            let p = MockPolicyParams {
                weights: Tensor::new(vec![36, 4], flat.values()[..144].to_vec()).unwrap(),
                bias: Tensor::new(vec![1, 4], flat.values()[144..].to_vec()).unwrap(),
                ..old.clone()
            };
            surrogate_with_gradient(&p, &groups, &old, &gcfg).unwrap()
        },
        &Tensor::vector(start),
        1e-5,
    );
    check(bellman < 1e-3 && surrogate < 1e-5, format!("bellman rel err {bellman:.2e} (< 1e-3), surrogate {surrogate:.2e} (< 1e-5)"))
}

fn bandit_record() -> RolloutRecord {
    let text = MockPolicyParams::default().templates[0][0].clone();
    RolloutRecord {
        step: 0,
        intersection: "intersection_2_2".into(),
        prompt: render_prompt(&appendix_fixture(), DEFAULT_TASK).text,
        q_values: Q,
        candidates: vec![Candidate { parse: parse_response(&text), text, reward: 0.4 }],
        executed: SignalPhase::Etwt,
        fallback: false,
        joint_scoring: None,
    }
}

fn bandit_convergence() -> Outcome {
    let cfg = GrpoConfig { group_size: 4, learning_rate: 1e-2, ..GrpoConfig::default() };
    let records = [bandit_record()];
    let f = policy_features(&records[0].prompt).unwrap();
    let reference = MockPolicyParams::default();
    let mut params = reference.clone();
    let mut opt = GrpoOptimizer::default();
    for step in 0..500 {
        let groups = build_groups(&params, &records, &cfg, step as u64).unwrap();
        let (p, o, _) = grpo_step(&params, &groups, &params, &reference, &opt, &cfg).unwrap();
        params = p;
        opt = o;
        let pi = params.probabilities(&f, 1.0)[0];
        if pi > 0.9 {
            return check(true, format!("pi(ETWT) = {pi:.3} after {} steps", step + 1));
        }
    }
    check(false, format!("pi(ETWT) = {:.3} after 500 steps", params.probabilities(&f, 1.0)[0]))
}

fn advantage_exactness() -> Outcome {
    let a = group_advantages(&[0.0, 2.0], 0.0);
    let z = group_advantages(&[0.7; 4], 1e-4);
    check(a == [-1.0, 1.0] && z == [0.0; 4], format!("(0,2) -> {a:?}; all-equal -> {z:?}"))
}

fn parser_suite() -> Outcome {
    let trace = parse_response(TRACE) == ParseResult::Valid(SignalPhase::Etwt);
    let zero = "Looking at the queues, the east-west through lanes are busiest.";
    let multi = "<signal>ETWT</signal> or maybe <signal>NTST</signal>";
    let zero_invalid = !parse_response(zero).is_valid();
    let multi_invalid = !parse_response(multi).is_valid();
    let scores = score_candidates(&Q, &[parse_response(zero), parse_response(multi)], 0.0);
    let lookups = [reward_lookup(&Q, zero, 0.0), reward_lookup(&Q, multi, 0.0)];
    let pass = trace && zero_invalid && multi_invalid && scores == [0.0, 0.0] && lookups == [0.0, 0.0];
    check(pass, format!("trace valid {trace}, zero-tag invalid {zero_invalid}, multi-tag invalid {multi_invalid}, invalid scores {scores:?}"))
}

fn js_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut projection_ok = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=4);
        let joints: Vec<JointCandidate> = (0..k)
            .map(|j| JointCandidate {
                index: j + 1,
                actions: (0..n).map(|i| (format!("i{i}"), SignalPhase::from_index(rng.gen_range(0..5)))).collect(),
            })
            .collect();
        let returns: Vec<f64> = (0..k).map(|_| rng.gen_range(-20.0..0.0)).collect();
        let mut oracle = BTreeMap::new();
        for i in 0..n {
            let id = format!("i{i}");
            let mut q = [0.0; 4];
            for (a, slot) in q.iter_mut().enumerate() {
                let mut hits = Vec::new();
                for (jc, g) in joints.iter().zip(&returns) {
                    if jc.actions[&id] == Some(SignalPhase::ALL[a]) {
                        hits.push(*g);
                    }
                }
                *slot = if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 };
            }
            oracle.insert(id, QVector(q));
        }
        projection_ok += (project_scores(&joints, &returns, 0.0) == oracle) as usize;
    }

    let mut stuck = build_grid(1, 1, 300.0, &FlowSpec::default(), 0).unwrap();
    stuck
        .place_vehicle(&["intersection_1_2->intersection_1_1:left", "intersection_1_1->intersection_2_1:exit"], 300.0, 0.0)
        .unwrap();
    let etwt = JointCandidate { index: 1, actions: BTreeMap::from([("intersection_1_1".to_string(), Some(SignalPhase::Etwt))]) };
    let mut policy = MockPolicy {
        params: MockPolicyParams {
            bias: Tensor::new(vec![1, 4], vec![30.0, -30.0, -30.0, -30.0]).unwrap(),
            ..MockPolicyParams::default()
        },
        sampling: SamplingParams::default(),
    };
    let js = JsConfig { horizon: 3, gamma: 0.8, alpha: 1.0, beta: 0.0, ..JsConfig::default() };
    let g = evaluate_candidate(&stuck.snapshot(), &etwt, &mut policy, &js, 0).unwrap();

    let mut pair = build_grid(1, 2, 300.0, &FlowSpec::default(), 0).unwrap();
    for pos in [300.0, 290.0, 280.0, 270.0] {
        pair.place_vehicle(&["intersection_0_1->intersection_1_1:left", "intersection_1_1->intersection_1_2:exit"], pos, 0.0)
            .unwrap();
    }
    let hand = mixed_reward(&pair, 0.5, 0.3).unwrap();
    check(
        projection_ok == 100 && g == -2.44 && hand == -2.0,
        format!("projection exact {projection_ok}/100; H=3 return {g:?}; hand case {hand:?}"),
    )
}

fn conservation_and_determinism() -> Outcome {
    let mut violations = 0;
    for seed in 0..10 {
        let mut s = grid_state(2, 2, 0.1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..120 {
            let joint = s.network().real_intersections().iter().map(|&n| (n, SignalPhase::ALL[rng.gen_range(0..4)])).collect();
            s.apply_actions(&joint).unwrap();
            while {
                s.step();
                violations += (s.entered() != (s.active_count() + s.departed().len()) as u64) as usize;
                !s.at_decision_boundary()
            } {}
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let critic = FrozenCritic::freeze(CriticParams::init(&CriticConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)), CriticConfig::default());
    let mut files = Vec::new();
    for run in 0..2 {
        let mut env = grid_state(2, 2, 0.1, 3);
        let mut policy = MockPolicy { params: MockPolicyParams::default(), sampling: SamplingParams::default() };
        let cfg = RolloutConfig { seed: 17, episode: 1200, ..RolloutConfig::default() };
        let out = collect_episode(&mut env, &mut policy, &critic, &cfg).unwrap();
        let path = dir.path().join(format!("{run}.jsonl"));
        persist_records(&out.records, None, &path).unwrap();
        files.push(fs::read(path).unwrap());
    }
    let identical = files[0] == files[1];
    check(violations == 0 && identical, format!("{violations} conservation violations over 10 seeds; record files identical: {identical}"))
}

fn golden_prompt() -> Outcome {
    let rendered = render_prompt(&appendix_fixture(), DEFAULT_TASK).text;
    check(rendered == GOLDEN, format!("{} bytes rendered, {} golden", rendered.len(), GOLDEN.len()))
}

fn schedule_values() -> Outcome {
    let cfg = CriticConfig::default();
    let (e0, e100, r4) = (epsilon(&cfg, 0), epsilon(&cfg, 100), intersection_reward(&cfg, 4));
    check(e0 == 0.8 && e100 == 0.2 && r4 == -1.0, format!("epsilon(0) = {e0}, epsilon(100) = {e100}, reward(4) = {r4}"))
}

fn end_to_end() -> Outcome {
    let net = RoadNetwork::grid(2, 2, 300.0).unwrap();
    let flow = synthetic_flow(&net, &DemandProfile::uniform(3600.0, 0.1), 21).unwrap();
    let env = || build_grid(2, 2, 300.0, &flow, 21).unwrap();
    let ccfg = CriticConfig { buffer_capacity: 2000, sample_size: 500, epochs: 50, seed: 2, ..CriticConfig::default() };
    let (params, _) = train_critic(&mut |_| Ok(env()), &ccfg, 5).unwrap();
    let critic = FrozenCritic::freeze(params, ccfg);

    let sampling = SamplingParams::default();
    let policy_att = |p: &MockPolicyParams| {
        let mut c = PolicyController { policy: MockPolicy { params: p.clone(), sampling: sampling.clone() }, seed: 99 };
        att(env(), &mut c)
    };
    let initial = MockPolicyParams::default();
    let before = policy_att(&initial);
    let mut params = initial;
    let mut records = 0;
    for episode in 0..2 {
        let mut policy = MockPolicy { params: params.clone(), sampling: sampling.clone() };
        let rcfg = RolloutConfig { seed: episode, ..RolloutConfig::default() };
        let out = collect_episode(&mut env(), &mut policy, &critic, &rcfg).unwrap();
        records += out.records.len();
        let gcfg = GrpoConfig { seed: episode, ..GrpoConfig::default() };
        params = train_grpo(&params, &out.records, &gcfg).unwrap().0;
    }
    let after = policy_att(&params);
    check(
        records == 2 * 120 * 4 && after <= before * 1.01,
        format!("{records} records; mock-policy ATT {before:.1} -> {after:.1} (bound {:.1})", before * 1.01),
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("controller ordering", Duration::from_secs(120), controller_ordering),
        ("critic learning", Duration::from_secs(300), critic_learning),
        ("gradient checks", Duration::MAX, gradient_checks),
        ("GRPO bandit convergence", Duration::from_secs(30), bandit_convergence),
        ("advantage exactness", Duration::MAX, advantage_exactness),
        ("parser suite", Duration::MAX, parser_suite),
        ("joint-scoring math", Duration::MAX, js_math),
        ("conservation and determinism", Duration::MAX, conservation_and_determinism),
        ("golden prompt", Duration::MAX, golden_prompt),
        ("schedule values", Duration::MAX, schedule_values),
        ("end-to-end smoke", Duration::from_secs(600), end_to_end),
    ];
    let mut failures = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed < limit;
        let pass = outcome.pass && in_time;
        failures += !pass as usize;
        let budget = if limit == Duration::MAX { String::new() } else { format!(", limit {}s", limit.as_secs()) };
        println!(
            "{} criterion {:>2} {name}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
