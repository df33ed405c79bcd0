use std::thread;
use std::time::Duration;

use serde::Deserialize;

use super::{Policy, PolicyError, ResponseSample, SamplingParams};
use crate::prompting::PromptText;
use crate::Result;

pub const LLM_URL_ENV: &str = "DGLIGHT_LLM_URL";

const EXCERPT_CHARS: usize = 200;

/// A completion endpoint accepting `{model, prompt, n, temperature, top_p,
/// top_k, max_tokens}` and answering `{choices: [{text}]}`.
#[derive(Clone, Debug)]
pub struct LlmEndpoint {
    pub url: String,
    pub model: String,
    pub timeout: Duration,
    pub attempts: u32,
    pub backoff: Duration,
}

impl LlmEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            timeout: Duration::from_secs(120),
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Uses `url` when given, otherwise the `DGLIGHT_LLM_URL` environment variable.
    pub fn resolve(url: Option<&str>, model: &str) -> Result<Self, PolicyError> {
        match url.map(str::to_string).or_else(|| std::env::var(LLM_URL_ENV).ok()) {
            Some(u) if !u.is_empty() => Ok(Self::new(u, model)),
            _ => Err(PolicyError::MissingUrl),
        }
    }
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

enum Attempt {
    Retry(String),
    Fatal(PolicyError),
}

fn attempt(agent: &ureq::Agent, ep: &LlmEndpoint, body: &serde_json::Value, k: usize) -> Result<Vec<String>, Attempt> {
    let mut resp = agent.post(&ep.url).send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(Attempt::Fatal(PolicyError::Status { status, excerpt: text.chars().take(EXCERPT_CHARS).collect() }));
    }
    let parsed: Completion = serde_json::from_str(&text).map_err(|e| Attempt::Retry(format!("malformed body: {e}")))?;
    if parsed.choices.len() != k {
        return Err(Attempt::Retry(format!("expected {k} choices, got {}", parsed.choices.len())));
    }
    Ok(parsed.choices.into_iter().map(|c| c.text).collect())
}

/// Requests `k` completions of `prompt`, retrying transport failures and
/// malformed bodies with exponential backoff.
pub fn llm_generate(ep: &LlmEndpoint, prompt: &str, k: usize, sampling: &SamplingParams) -> Result<Vec<String>, PolicyError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(ep.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let body = serde_json::json!({
        "model": ep.model,
        "prompt": prompt,
        "n": k,
        "temperature": sampling.temperature,
        "top_p": sampling.top_p,
        "top_k": sampling.top_k,
        "max_tokens": sampling.max_tokens,
    });
    let mut last = String::new();
    for i in 0..ep.attempts.max(1) {
        if i > 0 {
            thread::sleep(ep.backoff * 2u32.pow(i - 1));
        }
        match attempt(&agent, ep, &body, k) {
            Ok(texts) => return Ok(texts),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(msg)) => {
                log::warn!("completion attempt {} failed: {msg}", i + 1);
                last = msg;
            }
        }
    }
    Err(PolicyError::Transport { attempts: ep.attempts.max(1), message: last })
}

#[derive(Clone, Debug)]
pub struct LlmPolicy {
    pub endpoint: LlmEndpoint,
    pub sampling: SamplingParams,
}

impl Policy for LlmPolicy {
    fn name(&self) -> &str {
        "llm"
    }

    fn generate(&mut self, prompt: &PromptText, k: usize, _seed: u64) -> Result<Vec<ResponseSample>> {
        let texts = llm_generate(&self.endpoint, &prompt.text, k, &self.sampling)?;
        Ok(texts.into_iter().map(|text| ResponseSample { text, phase: None, logprob: None }).collect())
    }
}
