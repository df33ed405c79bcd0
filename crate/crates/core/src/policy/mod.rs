//! Response-generating policies: the differentiable mock and an HTTP client.

mod llm;
mod mock;

use serde::{Deserialize, Serialize};

use crate::prompting::PromptText;
use crate::Result;

pub use llm::{llm_generate, LlmEndpoint, LlmPolicy, LLM_URL_ENV};
pub use mock::{
    default_templates, mock_generate, mock_logprob, mock_logprob_batch, policy_features, MockPolicy,
    MockPolicyParams, MOCK_CHECKPOINT_KIND, POLICY_FEATURE_DIM,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub max_tokens: u32,
    pub n: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, top_k: 50, max_tokens: 1024, n: 4 }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || self.n == 0 {
            return Err(crate::Error::InvalidArgument(format!("sampling {self:?}")));
        }
        Ok(())
    }
}

/// One generated response. Phase, template and log-probability are only
/// known for the mock policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<crate::sim::SignalPhase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {excerpt}")]
    Status { status: u16, excerpt: String },
    #[error("response is not from the template bank: {0:?}")]
    UnknownTemplate(String),
    #[error("no endpoint URL; pass one or set {LLM_URL_ENV}")]
    MissingUrl,
}

/// Anything that can answer a prompt with `k` responses.
pub trait Policy {
    fn name(&self) -> &str;

    fn generate(&mut self, prompt: &PromptText, k: usize, seed: u64) -> Result<Vec<ResponseSample>>;
}
