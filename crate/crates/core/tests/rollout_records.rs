use std::fs;

use dglight::baselines::FixedTimePlan;
use dglight::controller::{run_episode, EpisodeSpec};
use dglight::critic::{CriticConfig, CriticParams, FrozenCritic};
use dglight::policy::{MockPolicy, MockPolicyParams, Policy, PolicyError, ResponseSample, SamplingParams};
use dglight::prompting::PromptText;
use dglight::rollout::{collect_episode, load_record_file, load_records, persist_records, RolloutConfig};
use dglight::sim::{build_grid, synthetic_flow, DemandProfile, RoadNetwork, SignalPhase, SimState};
use dglight::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(rows: usize, cols: usize, seed: u64) -> SimState {
    let net = RoadNetwork::grid(rows, cols, 300.0).unwrap();
    let flow = synthetic_flow(&net, &DemandProfile::uniform(3600.0, 0.08), seed).unwrap();
    build_grid(rows, cols, 300.0, &flow, seed).unwrap()
}

fn critic(seed: u64) -> FrozenCritic {
    let cfg = CriticConfig::default();
    let params = CriticParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    FrozenCritic::freeze(params, cfg)
}

fn mock(bias: [f64; 4]) -> MockPolicy {
    let params = MockPolicyParams { bias: Tensor::new(vec![1, 4], bias.to_vec()).unwrap(), ..MockPolicyParams::default() };
    MockPolicy { params, sampling: SamplingParams::default() }
}

struct Mute;

impl Policy for Mute {
    fn name(&self) -> &str {
        "mute"
    }

    fn generate(&mut self, _: &PromptText, k: usize, _: u64) -> dglight::Result<Vec<ResponseSample>> {
        Ok(vec![ResponseSample { text: "thinking...".into(), phase: None, logprob: None }; k])
    }
}

struct FailsAfter(usize);

impl Policy for FailsAfter {
    fn name(&self) -> &str {
        "flaky"
    }

    fn generate(&mut self, p: &PromptText, k: usize, seed: u64) -> dglight::Result<Vec<ResponseSample>> {
        if self.0 == 0 {
            return Err(PolicyError::Transport { attempts: 3, message: "connection refused".into() }.into());
        }
        self.0 -= 1;
        mock([0.0; 4]).generate(p, k, seed)
    }
}

#[test]
fn one_intersection_hour_gives_120_consistent_records() {
    let mut env = grid(1, 1, 0);
    let cfg = RolloutConfig::default();
    let out = collect_episode(&mut env, &mut mock([0.0; 4]), &critic(1), &cfg).unwrap();
    assert_eq!(out.records.len(), 120);
    assert!(out.truncated.is_none());
    for r in &out.records {
        assert_eq!(r.candidates.len(), 4);
        assert!(r.is_consistent(cfg.r_invalid));
        assert!(!r.fallback);
    }
}

#[test]
fn record_count_scales_with_intersections() {
    let mut env = grid(2, 2, 1);
    let cfg = RolloutConfig { episode: 600, ..RolloutConfig::default() };
    let out = collect_episode(&mut env, &mut mock([0.0; 4]), &critic(2), &cfg).unwrap();
    assert_eq!(out.records.len(), 20 * 4);
}

#[test]
fn silent_policy_executes_critic_argmax() {
    let mut env = grid(1, 1, 2);
    let out = collect_episode(&mut env, &mut Mute, &critic(3), &RolloutConfig::default()).unwrap();
    assert_eq!(out.records.len(), 120);
    for r in &out.records {
        assert!(r.fallback);
        assert_eq!(r.executed, r.q_values.argmax());
        assert!(r.candidates.iter().all(|c| c.reward == 0.0));
    }
}

#[test]
fn peaked_policy_matches_a_pure_etwt_controller() {
    let mut env = grid(1, 1, 3);
    let out = collect_episode(&mut env, &mut mock([30.0, -30.0, -30.0, -30.0]), &critic(4), &RolloutConfig::default()).unwrap();
    assert!(out.records.iter().all(|r| r.executed == SignalPhase::Etwt));
    let mut reference = grid(1, 1, 3);
    let plan = FixedTimePlan::new(vec![SignalPhase::Etwt], vec![1]).unwrap();
    let m = run_episode(&mut reference, &mut dglight::baselines::FixedTimeController(plan), EpisodeSpec::default()).unwrap();
    assert_eq!(out.metrics, m);
}

#[test]
fn persistence_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    let mut first = None;
    for run in 0..2 {
        let mut env = grid(1, 2, 4);
        let cfg = RolloutConfig { seed: 9, ..RolloutConfig::default() };
        let out = collect_episode(&mut env, &mut mock([0.1, 0.0, -0.1, 0.2]), &critic(5), &cfg).unwrap();
        let path = dir.path().join(format!("run{run}.jsonl"));
        persist_records(&out.records, None, &path).unwrap();
        assert_eq!(load_records(&path).unwrap(), out.records);
        first.get_or_insert(out.records);
        paths.push(path);
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
}

#[test]
fn empty_record_list_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    persist_records(&[], None, &path).unwrap();
    assert!(load_records(&path).unwrap().is_empty());
    fs::write(&path, "").unwrap();
    assert!(load_records(&path).unwrap().is_empty());
}

#[test]
fn corrupted_line_is_reported_by_number() {
    let mut env = grid(1, 1, 5);
    let cfg = RolloutConfig { episode: 300, ..RolloutConfig::default() };
    let out = collect_episode(&mut env, &mut mock([0.0; 4]), &critic(6), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    persist_records(&out.records, None, &path).unwrap();
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    let half = lines[6].len() / 2;
    lines[6].truncate(half);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_records(&path) {
        Err(Error::Record { line, .. }) => assert_eq!(line, 7),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "{\"schema\":\"something-else\",\"version\":1}\n").unwrap();
    assert!(matches!(load_records(&path), Err(Error::Record { line: 1, .. })));
}

#[test]
fn policy_failure_truncates_and_marks_the_file() {
    let mut env = grid(1, 2, 6);
    let out = collect_episode(&mut env, &mut FailsAfter(5), &critic(7), &RolloutConfig::default()).unwrap();
    assert_eq!(out.records.len(), 5);
    let reason = out.truncated.clone().unwrap();
    assert!(reason.contains("connection refused"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.jsonl");
    persist_records(&out.records, Some(&reason), &path).unwrap();
    let (records, marker) = load_record_file(&path).unwrap();
    assert_eq!(records, out.records);
    assert_eq!(marker.as_deref(), Some(reason.as_str()));
}
