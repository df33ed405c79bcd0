//! Critic-scored rollout collection and the line-delimited record file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::max_pressure;
use crate::controller::{Controller, EpisodeSpec};
use crate::critic::{neighbor_lists, observe_all, FrozenCritic, QVector};
use crate::policy::Policy;
use crate::prompting::{parse_response, render_prompt, ParseResult, DEFAULT_TASK};
use crate::sim::{downstream_queue, observe, JointAction, MetricsReport, SignalPhase, SimState};
use crate::{Error, Result};

pub const RECORD_SCHEMA: &str = "dglight.rollout";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub k: usize,
    pub r_invalid: f64,
    pub episode: u64,
    pub interval: u64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { k: 4, r_invalid: 0.0, episode: 3600, interval: 30, seed: 0 }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("group size k must be at least 1".into()));
        }
        self.spec().map(|_| ())
    }

    pub fn spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::new(self.episode, self.interval)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub parse: ParseResult,
    pub reward: f64,
}

/// Horizon and mixing weights attached to records scored by forked rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointScoring {
    pub horizon: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub intersection: String,
    pub prompt: String,
    pub q_values: QVector,
    pub candidates: Vec<Candidate>,
    pub executed: SignalPhase,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_scoring: Option<JointScoring>,
}

impl RolloutRecord {
    pub fn parses(&self) -> Vec<ParseResult> {
        self.candidates.iter().map(|c| c.parse).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.reward).collect()
    }

    /// Rewards and executed phase re-derive from the stored values.
    pub fn is_consistent(&self, r_invalid: f64) -> bool {
        let parses = self.parses();
        let rewards = score_candidates(&self.q_values, &parses, r_invalid);
        let reparsed = self.candidates.iter().all(|c| parse_response(&c.text) == c.parse);
        let (executed, fallback) = select_executed(&rewards, &parses, &self.q_values);
        reparsed && rewards == self.rewards() && executed == self.executed && fallback == self.fallback
    }
}

pub fn score_candidates(q: &QVector, parses: &[ParseResult], r_invalid: f64) -> Vec<f64> {
    parses
        .iter()
        .map(|p| match p {
            ParseResult::Valid(a) => q[*a],
            ParseResult::Invalid(_) => r_invalid,
        })
        .collect()
}

/// Phase of the best-rewarded candidate (lowest index on ties). When that
/// candidate is invalid, the critic argmax is executed and the flag is set.
pub fn select_executed(rewards: &[f64], parses: &[ParseResult], q: &QVector) -> (SignalPhase, bool) {
    let mut best = None;
    for (j, &r) in rewards.iter().enumerate() {
        if best.is_none_or(|b: usize| r > rewards[b]) {
            best = Some(j);
        }
    }
    match best.and_then(|j| parses.get(j)).and_then(|p| p.phase()) {
        Some(phase) => (phase, false),
        None => (q.argmax(), true),
    }
}

/// Independent seed per (decision, intersection) pair.
pub(crate) fn stream_seed(seed: u64, step: usize, slot: usize) -> u64 {
    let mut z = seed
        .wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((slot as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub records: Vec<RolloutRecord>,
    pub metrics: MetricsReport,
    /// Set when a policy failure ended the episode early.
    pub truncated: Option<String>,
}

/// Runs one episode, scoring `cfg.k` sampled responses per intersection and
/// decision with the frozen critic and executing the best one.
pub fn collect_episode(
    env: &mut SimState,
    policy: &mut dyn Policy,
    critic: &FrozenCritic,
    cfg: &RolloutConfig,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let neighbors = neighbor_lists(env);
    let mut records = Vec::with_capacity(spec.decisions() * neighbors.len());
    for step in 0..spec.decisions() {
        let observations = observe_all(env)?;
        let q = critic.q_forward(&observations, &neighbors)?;
        let mut joint = JointAction::new();
        let mut boundary = Vec::with_capacity(observations.len());
        for (slot, (obs, q)) in observations.iter().zip(q).enumerate() {
            let mut prompt = render_prompt(obs, DEFAULT_TASK);
            prompt.step = step;
            let samples = match policy.generate(&prompt, cfg.k, stream_seed(cfg.seed, step, slot)) {
                Ok(s) => s,
                Err(Error::Policy(e)) => {
                    records.extend(boundary);
                    return Ok(EpisodeOutcome { records, metrics: env.metrics(), truncated: Some(e.to_string()) });
                }
                Err(e) => return Err(e),
            };
            if samples.len() != cfg.k {
                return Err(Error::InvalidArgument(format!("policy returned {} of {} samples", samples.len(), cfg.k)));
            }
            let parses: Vec<ParseResult> = samples.iter().map(|s| parse_response(&s.text)).collect();
            let rewards = score_candidates(&q, &parses, cfg.r_invalid);
            let (executed, fallback) = select_executed(&rewards, &parses, &q);
            if fallback {
                log::debug!("step {step} {}: executing critic argmax", obs.intersection);
            }
            joint.insert(env.network().node_index(&obs.intersection).expect("observed"), executed);
            boundary.push(RolloutRecord {
                step,
                intersection: obs.intersection.clone(),
                prompt: prompt.text,
                q_values: q,
                candidates: samples
                    .into_iter()
                    .zip(parses)
                    .zip(rewards)
                    .map(|((s, parse), reward)| Candidate { text: s.text, parse, reward })
                    .collect(),
                executed,
                fallback,
                joint_scoring: None,
            });
        }
        records.extend(boundary);
        env.apply_actions(&joint)?;
        env.advance_to_boundary();
    }
    Ok(EpisodeOutcome { records, metrics: env.metrics(), truncated: None })
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruncationMarker {
    truncated: String,
}

/// Writes the schema header, one record per line, and the truncation marker if any.
pub fn persist_records(records: &[RolloutRecord], truncated: Option<&str>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_header(&mut out, RECORD_SCHEMA)?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    if let Some(reason) = truncated {
        serde_json::to_writer(&mut out, &TruncationMarker { truncated: reason.to_string() })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn write_header(out: &mut impl Write, schema: &str) -> Result<()> {
    serde_json::to_writer(&mut *out, &Header { schema: schema.into(), version: RECORD_VERSION })?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads a line-delimited file with the given schema header; `f` parses each
/// body line. Returns the parsed lines and the truncation reason, if present.
pub(crate) fn read_lines<T>(
    path: &Path,
    schema: &str,
    mut f: impl FnMut(&str) -> serde_json::Result<T>,
) -> Result<(Vec<T>, Option<String>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut truncated = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let err = |message: String| Error::Record { line: n, message };
        if n == 1 {
            let h: Header = serde_json::from_str(&line).map_err(|e| err(format!("bad header: {e}")))?;
            if h.schema != schema || h.version != RECORD_VERSION {
                return Err(err(format!("expected {schema} v{RECORD_VERSION}, found {} v{}", h.schema, h.version)));
            }
            continue;
        }
        if truncated.is_some() {
            return Err(err("content after truncation marker".into()));
        }
        if let Ok(m) = serde_json::from_str::<TruncationMarker>(&line) {
            truncated = Some(m.truncated);
            continue;
        }
        out.push(f(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok((out, truncated))
}

pub fn load_record_file(path: &Path) -> Result<(Vec<RolloutRecord>, Option<String>)> {
    read_lines(path, RECORD_SCHEMA, |l| serde_json::from_str(l))
}

pub fn load_records(path: &Path) -> Result<Vec<RolloutRecord>> {
    Ok(load_record_file(path)?.0)
}

/// Executes one sampled response per intersection; unparseable responses
/// fall back to max pressure.
pub struct PolicyController<P> {
    pub policy: P,
    pub seed: u64,
}

impl<P: Policy> Controller for PolicyController<P> {
    fn name(&self) -> &str {
        self.policy.name()
    }

    fn decide(&mut self, state: &SimState, decision: usize) -> Result<JointAction> {
        let net = state.network();
        let mut joint = JointAction::new();
        for (slot, &node) in net.real_intersections().iter().enumerate() {
            let id = net.node_id(node);
            let obs = observe(state, id)?;
            let mut prompt = render_prompt(&obs, DEFAULT_TASK);
            prompt.step = decision;
            let sample = self.policy.generate(&prompt, 1, stream_seed(self.seed, decision, slot))?;
            let phase = match sample.first().map(|s| parse_response(&s.text)) {
                Some(ParseResult::Valid(p)) => p,
                _ => max_pressure(&obs, &downstream_queue(state, id)?),
            };
            joint.insert(node, phase);
        }
        Ok(joint)
    }
}

/// Every critic value of every record, keyed by intersection then step.
pub fn q_table(records: &[RolloutRecord]) -> BTreeMap<String, BTreeMap<usize, QVector>> {
    let mut out: BTreeMap<String, BTreeMap<usize, QVector>> = BTreeMap::new();
    for r in records {
        out.entry(r.intersection.clone()).or_default().insert(r.step, r.q_values);
    }
    out
}
