//! Group-relative policy optimisation of the mock policy from stored critic values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::QVector;
use crate::numerics::adam_step;
use crate::policy::{mock_generate, mock_logprob_batch, policy_features, MockPolicyParams, ResponseSample, SamplingParams, POLICY_FEATURE_DIM};
use crate::prompting::{parse_response, ParseResult};
use crate::rollout::{read_lines, stream_seed, write_header, RolloutRecord};
use crate::{AdamState, Error, Graph, Result, Tensor};

pub const DATASET_SCHEMA: &str = "dglight.grpo-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub std_stabilizer: f64,
    pub epochs: usize,
    /// Groups per optimiser step.
    pub prompts_per_step: usize,
    pub r_invalid: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            learning_rate: 1e-2,
            clip_epsilon: 0.2,
            kl_coeff: 0.0,
            std_stabilizer: 1e-4,
            epochs: 2,
            prompts_per_step: 16,
            r_invalid: 0.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.group_size >= 1
            && self.learning_rate > 0.0
            && self.clip_epsilon > 0.0
            && self.kl_coeff >= 0.0
            && self.std_stabilizer >= 0.0
            && self.prompts_per_step >= 1
            && self.temperature > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("grpo config {self:?}")));
        }
        Ok(())
    }
}

/// Critic value of the phase a completion proposes, or `r_invalid`.
pub fn reward_lookup(q: &QVector, completion: &str, r_invalid: f64) -> f64 {
    match parse_response(completion) {
        ParseResult::Valid(a) => q[a],
        ParseResult::Invalid(_) => r_invalid,
    }
}

/// `(r - mean) / (population std + stabilizer)`; all zeros when the std is 0.
pub fn group_advantages(rewards: &[f64], stabilizer: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + stabilizer)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub prompt: String,
    pub features: [f64; POLICY_FEATURE_DIM],
    pub completions: Vec<ResponseSample>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(prompt: String, completions: Vec<ResponseSample>, q: &QVector, cfg: &GrpoConfig) -> Result<Self> {
        let features = policy_features(&prompt)?;
        let rewards: Vec<f64> = completions.iter().map(|c| reward_lookup(q, &c.text, cfg.r_invalid)).collect();
        let advantages = group_advantages(&rewards, cfg.std_stabilizer);
        Ok(Self { prompt, features, completions, rewards, advantages })
    }
}

/// Samples a fresh group from `params` for every record's prompt.
pub fn build_groups(params: &MockPolicyParams, records: &[RolloutRecord], cfg: &GrpoConfig, seed: u64) -> Result<Vec<Group>> {
    let sampling = SamplingParams { temperature: cfg.temperature, n: cfg.group_size, ..SamplingParams::default() };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let features = policy_features(&r.prompt)?;
            let completions = mock_generate(params, &features, cfg.group_size, &sampling, stream_seed(seed, i, 0));
            Group::new(r.prompt.clone(), completions, &r.q_values, cfg)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoDiagnostics {
    pub surrogate: f64,
    pub mean_ratio: f64,
    pub clipped_fraction: f64,
    pub kl: f64,
}

/// Adam moments for the mock policy's weights and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoOptimizer {
    pub weights: AdamState,
    pub bias: AdamState,
}

impl Default for GrpoOptimizer {
    fn default() -> Self {
        Self { weights: AdamState::new(&[POLICY_FEATURE_DIM, 4]), bias: AdamState::new(&[1, 4]) }
    }
}

struct Objective {
    value: f64,
    grad_w: Tensor,
    grad_b: Tensor,
    diagnostics: GrpoDiagnostics,
}

fn flatten(groups: &[Group]) -> (Vec<[f64; POLICY_FEATURE_DIM]>, Vec<&str>, Vec<f64>) {
    let mut feats = Vec::new();
    let mut texts = Vec::new();
    let mut adv = Vec::new();
    for g in groups {
        for (c, &a) in g.completions.iter().zip(&g.advantages) {
            feats.push(g.features);
            texts.push(c.text.as_str());
            adv.push(a);
        }
    }
    (feats, texts, adv)
}

fn column(n: usize, v: Vec<f64>) -> Result<Tensor> {
    Ok(Tensor::new(vec![n, 1], v)?)
}

/// Clipped surrogate minus the KL penalty, with its gradient.
fn objective(
    params: &MockPolicyParams,
    groups: &[Group],
    old: &MockPolicyParams,
    reference: &MockPolicyParams,
    cfg: &GrpoConfig,
) -> Result<Objective> {
    let (feats, texts, adv) = flatten(groups);
    let n = texts.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no completions to train on".into()));
    }
    let old_lp = {
        let mut g = Graph::new();
        let w = g.leaf(old.weights.clone());
        let b = g.leaf(old.bias.clone());
        let lp = mock_logprob_batch(&mut g, w, b, old, &feats, &texts, cfg.temperature)?;
        g.value(lp).clone()
    };

    let mut g = Graph::new();
    let w = g.leaf(params.weights.clone());
    let b = g.leaf(params.bias.clone());
    let lp = mock_logprob_batch(&mut g, w, b, params, &feats, &texts, cfg.temperature)?;
    let old_lp = g.leaf(old_lp);
    let log_ratio = g.sub(lp, old_lp)?;
    let ratio = g.exp(log_ratio)?;
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let neg_lo = g.constant(-lo);
    let neg_hi = g.constant(-hi);
    let above_lo = g.add(ratio, neg_lo)?;
    let above_lo = g.relu(above_lo)?;
    let above_hi = g.add(ratio, neg_hi)?;
    let above_hi = g.relu(above_hi)?;
    let lo_c = g.constant(lo);
    let clipped = g.add(above_lo, lo_c)?;
    let clipped = g.sub(clipped, above_hi)?;
    let a = g.leaf(column(n, adv)?);
    let unclipped_term = g.mul(ratio, a)?;
    let clipped_term = g.mul(clipped, a)?;
    let gap = g.sub(unclipped_term, clipped_term)?;
    let gap = g.relu(gap)?;
    let surrogate = g.sub(unclipped_term, gap)?;
    let surrogate = g.mean(surrogate)?;

    let mut kl_value = 0.0;
    let objective = if cfg.kl_coeff > 0.0 {
        let x = g.leaf(Tensor::new(vec![n, POLICY_FEATURE_DIM], feats.iter().flatten().copied().collect())?);
        let z = g.matmul(x, w)?;
        let z = g.add(z, b)?;
        let z = g.scale(z, 1.0 / cfg.temperature)?;
        let p = g.softmax(z)?;
        let logp = g.log(p)?;
        let ref_logp: Vec<f64> = feats
            .iter()
            .flat_map(|f| reference.probabilities(f, cfg.temperature).map(f64::ln))
            .collect();
        let ref_logp = g.leaf(Tensor::new(vec![n, 4], ref_logp)?);
        let diff = g.sub(logp, ref_logp)?;
        let kl = g.mul(p, diff)?;
        let kl = g.sum(kl)?;
        let kl = g.scale(kl, 1.0 / n as f64)?;
        kl_value = g.value(kl).item();
        let penalty = g.scale(kl, -cfg.kl_coeff)?;
        g.add(surrogate, penalty)?
    } else {
        surrogate
    };

    let ratios = g.value(ratio).values().to_vec();
    let diagnostics = GrpoDiagnostics {
        surrogate: g.value(surrogate).item(),
        mean_ratio: ratios.iter().sum::<f64>() / n as f64,
        clipped_fraction: ratios.iter().filter(|&&r| r < lo || r > hi).count() as f64 / n as f64,
        kl: kl_value,
    };
    let grads = g.gradient(objective, &[w, b])?;
    Ok(Objective {
        value: g.value(objective).item(),
        grad_w: grads[&w].clone(),
        grad_b: grads[&b].clone(),
        diagnostics,
    })
}

/// Value and gradient of the maximised objective, flattened as `[weights..., bias...]`.
pub fn surrogate_with_gradient(
    params: &MockPolicyParams,
    groups: &[Group],
    old: &MockPolicyParams,
    cfg: &GrpoConfig,
) -> Result<(f64, Tensor)> {
    let o = objective(params, groups, old, old, cfg)?;
    let mut flat = o.grad_w.values().to_vec();
    flat.extend_from_slice(o.grad_b.values());
    Ok((o.value, Tensor::vector(flat)))
}

/// One Adam ascent step on the clipped surrogate.
pub fn grpo_step(
    params: &MockPolicyParams,
    groups: &[Group],
    old: &MockPolicyParams,
    reference: &MockPolicyParams,
    optimizer: &GrpoOptimizer,
    cfg: &GrpoConfig,
) -> Result<(MockPolicyParams, GrpoOptimizer, GrpoDiagnostics)> {
    let o = objective(params, groups, old, reference, cfg)?;
    let neg_w = o.grad_w.map(|v| -v);
    let neg_b = o.grad_b.map(|v| -v);
    let (weights, sw) = adam_step(&params.weights, &neg_w, &optimizer.weights, cfg.learning_rate)?;
    let (bias, sb) = adam_step(&params.bias, &neg_b, &optimizer.bias, cfg.learning_rate)?;
    let updated = MockPolicyParams { weights, bias, templates: params.templates.clone() };
    Ok((updated, GrpoOptimizer { weights: sw, bias: sb }, o.diagnostics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub mean_reward: f64,
    #[serde(flatten)]
    pub diagnostics: GrpoDiagnostics,
}

/// Resamples groups per stored prompt each epoch and steps over them in
/// minibatches of `prompts_per_step`.
pub fn train_grpo(
    initial: &MockPolicyParams,
    records: &[RolloutRecord],
    cfg: &GrpoConfig,
) -> Result<(MockPolicyParams, Vec<StepLog>)> {
    cfg.validate()?;
    let reference = initial.clone();
    let mut params = initial.clone();
    let mut optimizer = GrpoOptimizer::default();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let old = params.clone();
        let groups = build_groups(&old, records, cfg, cfg.seed.wrapping_add(epoch as u64))?;
        for (step, batch) in groups.chunks(cfg.prompts_per_step).enumerate() {
            let (p, o, diagnostics) = grpo_step(&params, batch, &old, &reference, &optimizer, cfg)?;
            params = p;
            optimizer = o;
            let rewards: Vec<f64> = batch.iter().flat_map(|g| g.rewards.iter().copied()).collect();
            log.push(StepLog {
                epoch,
                step,
                mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
                diagnostics,
            });
        }
    }
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub step: usize,
    pub intersection: String,
}

/// One training example for an external trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub prompt: String,
    pub q_values: QVector,
    pub r_invalid: f64,
    pub provenance: Provenance,
}

pub fn export_dataset(records: &[RolloutRecord], r_invalid: f64, path: &Path) -> Result<usize> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_header(&mut out, DATASET_SCHEMA)?;
    for r in records {
        let entry = DatasetEntry {
            prompt: r.prompt.clone(),
            q_values: r.q_values,
            r_invalid,
            provenance: Provenance { step: r.step, intersection: r.intersection.clone() },
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetEntry>> {
    Ok(read_lines(path, DATASET_SCHEMA, |l| serde_json::from_str(l))?.0)
}
