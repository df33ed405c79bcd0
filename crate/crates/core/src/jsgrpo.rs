//! Joint-simulation scoring: candidates aligned across intersections are
//! evaluated by forked short-horizon rollouts under a mixed congestion reward.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{max_pressure, max_pressure_joint};
use crate::critic::{neighbor_lists, QVector};
use crate::policy::Policy;
use crate::prompting::{parse_response, render_prompt, ParseResult, DEFAULT_TASK};
use crate::rollout::{score_candidates, select_executed, stream_seed, Candidate, EpisodeOutcome, JointScoring, RolloutConfig, RolloutRecord};
use crate::sim::{downstream_queue, intersection_queue, observe, JointAction, SignalPhase, SimState, Snapshot};
use crate::{Error, Result};

/// How actions after the first interval of a fork are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteriorMode {
    /// Resample one response per intersection from the policy.
    #[default]
    Policy,
    /// Max pressure everywhere; cheaper and not faithful to the method.
    MaxPressure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Score of a phase no joint candidate proposes.
    pub fallback: f64,
    pub interior: InteriorMode,
}

impl Default for JsConfig {
    fn default() -> Self {
        Self { horizon: 3, gamma: 0.8, alpha: 0.6, beta: 0.3, fallback: 0.0, interior: InteriorMode::Policy }
    }
}

impl JsConfig {
    pub fn h3() -> Self {
        Self::default()
    }

    pub fn h6() -> Self {
        Self { horizon: 6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon >= 1
            && (0.0..=1.0).contains(&self.gamma)
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta <= 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("joint scoring config {self:?}")));
        }
        Ok(())
    }

    pub fn scoring(&self) -> JointScoring {
        JointScoring { horizon: self.horizon, gamma: self.gamma, alpha: self.alpha, beta: self.beta }
    }
}

/// The `index`-th sample (1-based) of every intersection; `None` marks an invalid response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointCandidate {
    pub index: usize,
    pub actions: BTreeMap<String, Option<SignalPhase>>,
}

pub fn align_candidates(samples: &BTreeMap<String, Vec<ParseResult>>, k: usize) -> Result<Vec<JointCandidate>> {
    if let Some((id, s)) = samples.iter().find(|(_, s)| s.len() != k) {
        return Err(Error::InvalidArgument(format!("{id} has {} samples, expected {k}", s.len())));
    }
    Ok((0..k)
        .map(|j| JointCandidate {
            index: j + 1,
            actions: samples.iter().map(|(id, s)| (id.clone(), s[j].phase())).collect(),
        })
        .collect())
}

/// `-(1/|V|) Σ_i (α m_i + β mean_{N(i)} m + (1-α-β) mean_V m)`.
pub fn mixed_cost(queues: &[f64], neighbors: &[Vec<usize>], alpha: f64, beta: f64) -> f64 {
    if queues.is_empty() {
        return 0.0;
    }
    let n = queues.len() as f64;
    let global = queues.iter().sum::<f64>() / n;
    let rest = 1.0 - alpha - beta;
    let total: f64 = queues
        .iter()
        .zip(neighbors)
        .map(|(&m, nb)| {
            let local = if nb.is_empty() { 0.0 } else { nb.iter().map(|&j| queues[j]).sum::<f64>() / nb.len() as f64 };
            alpha * m + beta * local + rest * global
        })
        .sum();
    -(total / n)
}

/// Mixed congestion reward over incoming queued counts.
pub fn mixed_reward(state: &SimState, alpha: f64, beta: f64) -> Result<f64> {
    let net = state.network();
    let queues = net
        .real_intersections()
        .iter()
        .map(|&n| Ok(intersection_queue(state, net.node_id(n))? as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(mixed_cost(&queues, &neighbor_lists(state), alpha, beta))
}

/// `Σ_τ γ^τ r_τ` by compensated Horner evaluation, so the result is as if
/// computed in twice the working precision and rounded once.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let Some((&last, rest)) = rewards.split_last() else {
        return 0.0;
    };
    let (mut s, mut c) = (last, 0.0f64);
    for &r in rest.iter().rev() {
        let p = s * gamma;
        let pe = s.mul_add(gamma, -p);
        let t = p + r;
        let z = t - p;
        let te = (p - (t - z)) + (r - z);
        s = t;
        c = c.mul_add(gamma, pe + te);
    }
    s + c
}

/// Joint action for `state`, with max pressure standing in for invalid entries.
pub fn resolve_joint(state: &SimState, joint: &JointCandidate) -> Result<JointAction> {
    let net = state.network();
    let mut out = JointAction::new();
    for (id, action) in &joint.actions {
        let node = net.node_index(id).ok_or_else(|| crate::sim::SimError::UnknownIntersection(id.clone()))?;
        let phase = match action {
            Some(p) => *p,
            None => max_pressure(&observe(state, id)?, &downstream_queue(state, id)?),
        };
        out.insert(node, phase);
    }
    Ok(out)
}

fn sample_joint(state: &SimState, policy: &mut dyn Policy, step: usize, seed: u64) -> Result<JointCandidate> {
    let net = state.network();
    let mut actions = BTreeMap::new();
    for (slot, &node) in net.real_intersections().iter().enumerate() {
        let id = net.node_id(node);
        let mut prompt = render_prompt(&observe(state, id)?, DEFAULT_TASK);
        prompt.step = step;
        let sample = policy.generate(&prompt, 1, stream_seed(seed, step, slot))?;
        actions.insert(id.to_string(), sample.first().and_then(|s| parse_response(&s.text).phase()));
    }
    Ok(JointCandidate { index: 1, actions })
}

/// Discounted mixed reward of executing `joint` from a fork of `snapshot`,
/// followed by `horizon - 1` intervals of resampled or max-pressure actions.
pub fn evaluate_candidate(
    snapshot: &Snapshot,
    joint: &JointCandidate,
    policy: &mut dyn Policy,
    cfg: &JsConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let mut fork = snapshot.restore();
    let mut rewards = Vec::with_capacity(cfg.horizon);
    for tau in 0..cfg.horizon {
        let action = if tau == 0 {
            resolve_joint(&fork, joint)?
        } else {
            match cfg.interior {
                InteriorMode::Policy => resolve_joint(&fork, &sample_joint(&fork, policy, tau, seed)?)?,
                InteriorMode::MaxPressure => max_pressure_joint(&fork)?,
            }
        };
        fork.apply_actions(&action)?;
        fork.advance_to_boundary();
        rewards.push(mixed_reward(&fork, cfg.alpha, cfg.beta)?);
    }
    Ok(discounted_return(&rewards, cfg.gamma))
}

/// Per intersection and phase, the mean return of the joints proposing it.
pub fn project_scores(joints: &[JointCandidate], returns: &[f64], fallback: f64) -> BTreeMap<String, QVector> {
    let mut sums: BTreeMap<&str, ([f64; 4], [usize; 4])> = BTreeMap::new();
    for (joint, &g) in joints.iter().zip(returns) {
        for (id, action) in &joint.actions {
            let entry = sums.entry(id.as_str()).or_insert(([0.0; 4], [0; 4]));
            if let Some(p) = action {
                entry.0[p.index()] += g;
                entry.1[p.index()] += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(id, (s, c))| {
            let q = std::array::from_fn(|a| if c[a] == 0 { fallback } else { s[a] / c[a] as f64 });
            (id.to_string(), QVector(q))
        })
        .collect()
}

/// Like the critic-scored rollout, but each decision's candidates are scored
/// by projected forked returns.
pub fn collect_jsgrpo_episode(
    env: &mut SimState,
    policy: &mut dyn Policy,
    cfg: &RolloutConfig,
    js: &JsConfig,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    js.validate()?;
    let spec = cfg.spec()?;
    let mut records = Vec::new();
    for step in 0..spec.decisions() {
        let net = env.shared_network();
        let mut prompts = BTreeMap::new();
        let mut texts = BTreeMap::new();
        let mut parses = BTreeMap::new();
        for (slot, &node) in net.real_intersections().iter().enumerate() {
            let id = net.node_id(node).to_string();
            let mut prompt = render_prompt(&observe(env, &id)?, DEFAULT_TASK);
            prompt.step = step;
            let samples = match policy.generate(&prompt, cfg.k, stream_seed(cfg.seed, step, slot)) {
                Ok(s) => s,
                Err(Error::Policy(e)) => {
                    return Ok(EpisodeOutcome { records, metrics: env.metrics(), truncated: Some(e.to_string()) })
                }
                Err(e) => return Err(e),
            };
            parses.insert(id.clone(), samples.iter().map(|s| parse_response(&s.text)).collect::<Vec<_>>());
            texts.insert(id.clone(), samples.into_iter().map(|s| s.text).collect::<Vec<_>>());
            prompts.insert(id, prompt.text);
        }
        let joints = align_candidates(&parses, cfg.k)?;
        let snapshot = env.snapshot();
        let mut returns = Vec::with_capacity(joints.len());
        for joint in &joints {
            let seed = stream_seed(cfg.seed ^ 0x5EED, step, joint.index);
            match evaluate_candidate(&snapshot, joint, policy, js, seed) {
                Ok(g) => returns.push(g),
                Err(Error::Policy(e)) => {
                    return Ok(EpisodeOutcome { records, metrics: env.metrics(), truncated: Some(e.to_string()) })
                }
                Err(e) => return Err(e),
            }
        }
        let scores = project_scores(&joints, &returns, js.fallback);
        let mut action = JointAction::new();
        for (id, q) in scores {
            let p = &parses[&id];
            let rewards = score_candidates(&q, p, cfg.r_invalid);
            let (executed, fallback) = select_executed(&rewards, p, &q);
            action.insert(net.node_index(&id).expect("observed"), executed);
            records.push(RolloutRecord {
                step,
                candidates: texts[&id]
                    .iter()
                    .zip(p)
                    .zip(rewards)
                    .map(|((t, &parse), reward)| Candidate { text: t.clone(), parse, reward })
                    .collect(),
                prompt: prompts.remove(&id).expect("rendered"),
                intersection: id,
                q_values: q,
                executed,
                fallback,
                joint_scoring: Some(js.scoring()),
            });
        }
        env.apply_actions(&action)?;
        env.advance_to_boundary();
    }
    Ok(EpisodeOutcome { records, metrics: env.metrics(), truncated: None })
}
