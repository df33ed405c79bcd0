use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Policy, PolicyError, ResponseSample, SamplingParams};
use crate::numerics::{Checkpoint, NodeId, ParamMap};
use crate::prompting::{parse_prompt_state, PromptText};
use crate::sim::SignalPhase;
use crate::{Error, Graph, Result, Tensor};

pub const POLICY_FEATURE_DIM: usize = 36;
pub const MOCK_CHECKPOINT_KIND: &str = "mock-policy";

/// Lane counts `[queued, seg1, seg2, seg3]` per controlled lane, then the
/// known neighbour total of each phase, all read from the prompt text.
pub fn policy_features(prompt: &str) -> Result<[f64; POLICY_FEATURE_DIM]> {
    let state = parse_prompt_state(prompt).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut f = [0.0; POLICY_FEATURE_DIM];
    for (k, lane) in state.lanes.iter().enumerate() {
        f[4 * k] = lane.queued as f64;
        for s in 0..3 {
            f[4 * k + 1 + s] = lane.segments[s] as f64;
        }
    }
    for (p, n) in state.neighbors.iter().enumerate() {
        f[32 + p] = n.known_total() as f64;
    }
    Ok(f)
}

pub fn default_templates() -> Vec<Vec<String>> {
    SignalPhase::ALL
        .iter()
        .map(|p| {
            let lanes = p.relieves().trim_end_matches('.').to_lowercase();
            vec![
                format!(
                    "### Step 1: Analysis\n\nThe {lanes} hold the vehicles that matter most right now.\n\n### Step 2: Answer\n\n<signal>{p}</signal>"
                ),
                format!("Serving the {lanes} relieves the heaviest queues.\n\n<signal>{p}</signal>"),
            ]
        })
        .collect()
}

/// Linear-softmax policy over phases with a fixed bank of reasoning texts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockPolicyParams {
    /// `[36, 4]`
    pub weights: Tensor,
    /// `[1, 4]`
    pub bias: Tensor,
    /// Indexed by canonical phase; every entry carries exactly one decision tag.
    pub templates: Vec<Vec<String>>,
}

impl Default for MockPolicyParams {
    fn default() -> Self {
        Self {
            weights: Tensor::zeros(&[POLICY_FEATURE_DIM, 4]),
            bias: Tensor::zeros(&[1, 4]),
            templates: default_templates(),
        }
    }
}

impl MockPolicyParams {
    pub fn logits(&self, features: &[f64; POLICY_FEATURE_DIM]) -> [f64; 4] {
        let mut z = [0.0; 4];
        for (a, za) in z.iter_mut().enumerate() {
            *za = self.bias.values()[a]
                + features.iter().enumerate().map(|(i, x)| x * self.weights.values()[i * 4 + a]).sum::<f64>();
        }
        z
    }

    pub fn probabilities(&self, features: &[f64; POLICY_FEATURE_DIM], temperature: f64) -> [f64; 4] {
        let z = self.logits(features).map(|v| v / temperature);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = z.map(|v| (v - m).exp());
        let s: f64 = e.iter().sum();
        e.map(|v| v / s)
    }

    /// Phase and template index of a bank response.
    pub fn locate(&self, text: &str) -> Result<(SignalPhase, usize), PolicyError> {
        for (p, bank) in self.templates.iter().enumerate() {
            if let Some(t) = bank.iter().position(|s| s == text) {
                return Ok((SignalPhase::ALL[p], t));
            }
        }
        Err(PolicyError::UnknownTemplate(text.chars().take(80).collect()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = ParamMap::new();
        params.insert("weights".into(), self.weights.clone());
        params.insert("bias".into(), self.bias.clone());
        Checkpoint {
            kind: MOCK_CHECKPOINT_KIND.into(),
            params,
            config: Some(serde_json::json!({ "templates": self.templates })),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != MOCK_CHECKPOINT_KIND {
            return Err(Error::InvalidArgument(format!("checkpoint kind {:?} is not a mock policy", ck.kind)));
        }
        let get = |k: &str| ck.params.get(k).cloned().ok_or_else(|| Error::InvalidArgument(format!("missing {k}")));
        let templates = match ck.config.as_ref().and_then(|c| c.get("templates")) {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| Error::InvalidArgument(e.to_string()))?,
            None => default_templates(),
        };
        let out = Self { weights: get("weights")?, bias: get("bias")?, templates };
        if out.weights.shape() != [POLICY_FEATURE_DIM, 4] || out.bias.shape() != [1, 4] || out.templates.len() != 4 {
            return Err(Error::InvalidArgument("mock policy shapes".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Samples `k` responses: phase from `softmax(logits / T)`, then a uniform template.
pub fn mock_generate(
    params: &MockPolicyParams,
    features: &[f64; POLICY_FEATURE_DIM],
    k: usize,
    sampling: &SamplingParams,
    seed: u64,
) -> Vec<ResponseSample> {
    let probs = params.probabilities(features, sampling.temperature);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut a = 3;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    a = i;
                    break;
                }
            }
            let bank = &params.templates[a];
            let t = rng.gen_range(0..bank.len());
            ResponseSample {
                text: bank[t].clone(),
                phase: Some(SignalPhase::ALL[a]),
                logprob: Some(probs[a].ln() - (bank.len() as f64).ln()),
            }
        })
        .collect()
}

pub fn mock_logprob(
    params: &MockPolicyParams,
    features: &[f64; POLICY_FEATURE_DIM],
    text: &str,
    temperature: f64,
) -> Result<f64, PolicyError> {
    let (phase, _) = params.locate(text)?;
    let probs = params.probabilities(features, temperature);
    Ok(probs[phase.index()].ln() - (params.templates[phase.index()].len() as f64).ln())
}

/// Graph node `[n, 1]` of log-probabilities of `texts` under the policy whose
/// weights and bias are the graph nodes `w` and `b`.
pub fn mock_logprob_batch(
    g: &mut Graph,
    w: NodeId,
    b: NodeId,
    params: &MockPolicyParams,
    features: &[[f64; POLICY_FEATURE_DIM]],
    texts: &[&str],
    temperature: f64,
) -> Result<NodeId> {
    let n = texts.len();
    let mut mask = vec![0.0; n * 4];
    let mut offset = vec![0.0; n];
    for (i, text) in texts.iter().enumerate() {
        let (phase, _) = params.locate(text)?;
        mask[i * 4 + phase.index()] = 1.0;
        offset[i] = -(params.templates[phase.index()].len() as f64).ln();
    }
    let x = g.leaf(Tensor::new(vec![n, POLICY_FEATURE_DIM], features.iter().flatten().copied().collect())?);
    let z = g.matmul(x, w)?;
    let z = g.add(z, b)?;
    let z = g.scale(z, 1.0 / temperature)?;
    let p = g.softmax(z)?;
    let lp = g.log(p)?;
    let mask = g.leaf(Tensor::new(vec![n, 4], mask)?);
    let picked = g.mul(lp, mask)?;
    let ones = g.leaf(Tensor::filled(&[4, 1], 1.0));
    let rows = g.matmul(picked, ones)?;
    let offset = g.leaf(Tensor::new(vec![n, 1], offset)?);
    Ok(g.add(rows, offset)?)
}

/// The mock policy reading its features from the prompt text.
#[derive(Clone, Debug)]
pub struct MockPolicy {
    pub params: MockPolicyParams,
    pub sampling: SamplingParams,
}

impl Policy for MockPolicy {
    fn name(&self) -> &str {
        "mock-policy"
    }

    fn generate(&mut self, prompt: &PromptText, k: usize, seed: u64) -> Result<Vec<ResponseSample>> {
        let f = policy_features(&prompt.text)?;
        Ok(mock_generate(&self.params, &f, k, &self.sampling, seed))
    }
}
