use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;

use dglight::baselines::{FixedTimeController, FixedTimePlan, MaxPressureController, RandomController};
use dglight::controller::{run_episode, Controller, EpisodeSpec};
use dglight::critic::{self, CriticController, FrozenCritic};
use dglight::grpo::{export_dataset, train_grpo};
use dglight::jsgrpo::collect_jsgrpo_episode;
use dglight::policy::{LlmEndpoint, LlmPolicy, MockPolicy, MockPolicyParams, Policy};
use dglight::rollout::{collect_episode, load_records, persist_records, EpisodeOutcome, PolicyController};
use dglight::sim::{
    import_cityflow as import, load_flow, load_network, save_flow, save_network, synthetic_flow, DemandProfile,
    FlowSpec, MetricsReport, RoadNetwork, SimState,
};

use crate::config::{parse_grid, ControllerKind, RunConfig};

fn scenario(cfg: &RunConfig) -> anyhow::Result<(RoadNetwork, FlowSpec)> {
    match (&cfg.grid, &cfg.network) {
        (Some(g), None) => {
            let (rows, cols) = parse_grid(g)?;
            let net = RoadNetwork::grid(rows, cols, cfg.lane_length)?;
            let flow = synthetic_flow(&net, &DemandProfile::uniform(cfg.episode as f64, cfg.demand_rate), cfg.seed)?;
            Ok((net, flow))
        }
        (None, Some(n)) => {
            let flow = cfg.flow.as_ref().context("--network needs a matching --flow")?;
            Ok((load_network(n)?, load_flow(flow)?))
        }
        _ => bail!("give exactly one network source: --grid ROWSxCOLS or --network FILE"),
    }
}

fn fresh(net: &RoadNetwork, flow: &FlowSpec, seed: u64) -> anyhow::Result<SimState> {
    Ok(SimState::new(net.clone(), flow, seed)?)
}

fn prepare_out(cfg: &RunConfig) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(cfg.out.join("config.json"), text + "\n")?;
    Ok(&cfg.out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    controller: &'a str,
    dataset: &'a str,
    seed: u64,
    att: f64,
    aql: f64,
    awt: f64,
}

fn report(cfg: &RunConfig, out: &Path, controller: &str, m: &MetricsReport) -> anyhow::Result<()> {
    let dataset = cfg.dataset_name();
    let row = MetricsRow { controller, dataset: &dataset, seed: cfg.seed, att: m.att, aql: m.aql, awt: m.awt };
    write_json(&out.join("metrics.json"), &row)?;
    write_csv(&out.join("metrics.csv"), &[row])?;
    println!("{controller},{dataset},{},{},{},{}", cfg.seed, m.att, m.aql, m.awt);
    Ok(())
}

fn load_critic(cfg: &RunConfig) -> anyhow::Result<FrozenCritic> {
    let path = cfg.critic_checkpoint.as_ref().context("this command needs --critic CHECKPOINT")?;
    Ok(FrozenCritic::load(path)?)
}

fn mock_params(cfg: &RunConfig) -> anyhow::Result<MockPolicyParams> {
    Ok(match &cfg.policy_checkpoint {
        Some(p) => MockPolicyParams::load(p)?,
        None => MockPolicyParams::default(),
    })
}

fn policy(cfg: &RunConfig) -> anyhow::Result<Box<dyn Policy>> {
    Ok(match cfg.controller {
        ControllerKind::Llm => Box::new(LlmPolicy {
            endpoint: LlmEndpoint::resolve(cfg.llm_url.as_deref(), &cfg.model)?,
            sampling: cfg.sampling.clone(),
        }),
        _ => Box::new(MockPolicy { params: mock_params(cfg)?, sampling: cfg.sampling.clone() }),
    })
}

struct Boxed(Box<dyn Policy>);

impl Policy for Boxed {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn generate(&mut self, p: &dglight::prompting::PromptText, k: usize, seed: u64) -> dglight::Result<Vec<dglight::policy::ResponseSample>> {
        self.0.generate(p, k, seed)
    }
}

fn controller(cfg: &RunConfig) -> anyhow::Result<Box<dyn Controller>> {
    Ok(match cfg.controller {
        ControllerKind::Fixedtime => Box::new(FixedTimeController(FixedTimePlan::default())),
        ControllerKind::Maxpressure => Box::new(MaxPressureController),
        ControllerKind::Random => Box::new(RandomController { seed: cfg.seed }),
        ControllerKind::CriticGreedy => Box::new(CriticController(load_critic(cfg)?)),
        ControllerKind::MockPolicy | ControllerKind::Llm => {
            Box::new(PolicyController { policy: Boxed(policy(cfg)?), seed: cfg.seed })
        }
    })
}

pub fn gen_net(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.grid.is_none() {
        bail!("gen-net needs --grid ROWSxCOLS");
    }
    let out = prepare_out(cfg)?;
    let (net, flow) = scenario(cfg)?;
    save_network(&net, &out.join("network.json"))?;
    save_flow(&flow, &out.join("flow.json"))?;
    println!("{} intersections, {} vehicles", net.real_intersections().len(), flow.vehicle_count());
    Ok(())
}

pub fn import_cityflow(cfg: &RunConfig) -> anyhow::Result<()> {
    let (Some(roadnet), Some(flow)) = (&cfg.network, &cfg.flow) else {
        bail!("import-cityflow needs --network ROADNET.json and --flow FLOW.json");
    };
    let (net, flow, report) = import(&fs::read_to_string(roadnet)?, &fs::read_to_string(flow)?)?;
    let out = prepare_out(cfg)?;
    save_network(&net, &out.join("network.json"))?;
    save_flow(&flow, &out.join("flow.json"))?;
    write_json(&out.join("import_warnings.json"), &report.warnings)?;
    println!("{} intersections, {} vehicles", net.real_intersections().len(), flow.vehicle_count());
    Ok(())
}

pub fn baseline(cfg: &RunConfig) -> anyhow::Result<()> {
    if !matches!(cfg.controller, ControllerKind::Fixedtime | ControllerKind::Maxpressure | ControllerKind::Random) {
        bail!("baseline runs fixedtime, maxpressure or random; use eval for {}", cfg.controller.label());
    }
    eval(cfg)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let (net, flow) = scenario(cfg)?;
    let mut ctrl = controller(cfg)?;
    let out = prepare_out(cfg)?;
    let mut state = fresh(&net, &flow, cfg.seed)?;
    let m = run_episode(&mut state, ctrl.as_mut(), EpisodeSpec::new(cfg.episode, cfg.interval)?)?;
    report(cfg, out, cfg.controller.label(), &m)
}

#[derive(Serialize)]
struct LossRow {
    round: usize,
    epsilon: f64,
    loss: Option<f64>,
    greedy_att: f64,
    buffer_len: usize,
}

pub fn train_critic(cfg: &RunConfig) -> anyhow::Result<()> {
    let (net, flow) = scenario(cfg)?;
    let out = prepare_out(cfg)?;
    let (params, log) = critic::train_critic(&mut |_| Ok(SimState::new(net.clone(), &flow, cfg.seed)?), &cfg.critic, cfg.critic_rounds)?;
    FrozenCritic::freeze(params, cfg.critic.clone()).save(&out.join("critic.json"))?;
    let rows: Vec<LossRow> = log
        .iter()
        .map(|r| LossRow { round: r.round, epsilon: r.epsilon, loss: r.loss, greedy_att: r.greedy_att, buffer_len: r.buffer_len })
        .collect();
    write_csv(&out.join("loss.csv"), &rows)?;
    if let Some(last) = log.last() {
        println!("round {}: loss {:?}, greedy ATT {}", last.round, last.loss, last.greedy_att);
    }
    Ok(())
}

fn finish_records(cfg: &RunConfig, out: &Path, outcome: &EpisodeOutcome, label: &str) -> anyhow::Result<()> {
    persist_records(&outcome.records, outcome.truncated.as_deref(), &out.join("records.jsonl"))?;
    if let Some(reason) = &outcome.truncated {
        bail!("episode truncated after {} records: {reason}", outcome.records.len());
    }
    println!("{} records", outcome.records.len());
    report(cfg, out, label, &outcome.metrics)
}

pub fn rollout(cfg: &RunConfig) -> anyhow::Result<()> {
    let (net, flow) = scenario(cfg)?;
    let critic = load_critic(cfg)?;
    let mut policy = policy(cfg)?;
    let out = prepare_out(cfg)?;
    let mut env = fresh(&net, &flow, cfg.seed)?;
    let outcome = collect_episode(&mut env, policy.as_mut(), &critic, &cfg.rollout)?;
    finish_records(cfg, out, &outcome, "rollout")
}

pub fn jsgrpo_rollout(cfg: &RunConfig) -> anyhow::Result<()> {
    let (net, flow) = scenario(cfg)?;
    let mut policy = policy(cfg)?;
    let out = prepare_out(cfg)?;
    let mut env = fresh(&net, &flow, cfg.seed)?;
    let outcome = collect_jsgrpo_episode(&mut env, policy.as_mut(), &cfg.rollout, &cfg.jsgrpo)?;
    finish_records(cfg, out, &outcome, &format!("jsgrpo-h{}", cfg.jsgrpo.horizon))
}

#[derive(Serialize)]
struct DiagnosticsRow {
    epoch: usize,
    step: usize,
    mean_reward: f64,
    surrogate: f64,
    mean_ratio: f64,
    clipped_fraction: f64,
    kl: f64,
}

pub fn grpo_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let path = cfg.records.as_ref().context("grpo-train needs --records FILE")?;
    let records = load_records(path)?;
    let initial = mock_params(cfg)?;
    let out = prepare_out(cfg)?;
    let (trained, log) = train_grpo(&initial, &records, &cfg.grpo)?;
    trained.save(&out.join("policy.json"))?;
    export_dataset(&records, cfg.grpo.r_invalid, &out.join("dataset.jsonl"))?;
    let rows: Vec<DiagnosticsRow> = log
        .iter()
        .map(|s| DiagnosticsRow {
            epoch: s.epoch,
            step: s.step,
            mean_reward: s.mean_reward,
            surrogate: s.diagnostics.surrogate,
            mean_ratio: s.diagnostics.mean_ratio,
            clipped_fraction: s.diagnostics.clipped_fraction,
            kl: s.diagnostics.kl,
        })
        .collect();
    write_csv(&out.join("diagnostics.csv"), &rows)?;
    println!("{} records, {} steps", records.len(), log.len());
    Ok(())
}
