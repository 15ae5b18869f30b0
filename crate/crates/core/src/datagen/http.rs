//! Chat-completions client for the http generation backend: bearer auth
//! from a named environment variable, bounded retries with exponential
//! backoff on 429/5xx, and a bounded worker pool across prompts.
//!
//! The auth token is read at request time and never logged or persisted;
//! errors name the environment variable, not its value.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{generate_pair, DatagenError, GenerationBackend, PairOutcome, PrefixTemplate};
use crate::datagen::CleaningRuleSet;
use crate::types::{Prompt, PromptId};

/// Backoff and retry limits for transient failures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            initial_delay_ms: 1000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry attempt `attempt` (0-based): initial * 2^attempt.
    pub fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.initial_delay_ms.saturating_mul(1u64 << attempt.min(20)))
    }
}

/// Configuration for the chat-completions backend.
#[derive(Clone, Debug)]
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub auth_env: String,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl HttpBackend {
    fn agent(&self) -> ureq::Agent {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build();
        ureq::Agent::new_with_config(config)
    }

    fn token(&self) -> Result<String, DatagenError> {
        std::env::var(&self.auth_env).map_err(|_| DatagenError::MissingAuthToken {
            env: self.auth_env.clone(),
        })
    }

    /// One completion with retries. Retries 429 and 5xx with exponential
    /// backoff; other HTTP statuses fail immediately.
    pub fn complete(&self, user_content: &str) -> Result<String, DatagenError> {
        let token = self.token()?;
        let agent = self.agent();
        let url = format!(
            "{}/chat/completions",
            self.endpoint.trim_end_matches('/')
        );
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": user_content}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let mut attempt: u32 = 0;
        loop {
            let result = agent
                .post(&url)
                .header("authorization", &format!("Bearer {token}"))
                .send_json(&body);
            match result {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        let parsed: serde_json::Value = response
                            .body_mut()
                            .read_json()
                            .map_err(|e| DatagenError::BadCompletion(e.to_string()))?;
                        return extract_content(&parsed);
                    }
                    let retryable = status == 429 || (500..600).contains(&status);
                    if retryable && attempt < self.retry.max_retries {
                        std::thread::sleep(self.retry.delay(attempt));
                        attempt += 1;
                        continue;
                    }
                    let excerpt = response
                        .body_mut()
                        .read_to_string()
                        .unwrap_or_default()
                        .chars()
                        .take(200)
                        .collect();
                    return Err(DatagenError::Http {
                        status,
                        body_excerpt: excerpt,
                    });
                }
                Err(ureq::Error::Timeout(_)) => {
                    if attempt < self.retry.max_retries {
                        std::thread::sleep(self.retry.delay(attempt));
                        attempt += 1;
                        continue;
                    }
                    return Err(DatagenError::Timeout(self.timeout));
                }
                Err(e) => {
                    if attempt < self.retry.max_retries {
                        std::thread::sleep(self.retry.delay(attempt));
                        attempt += 1;
                        continue;
                    }
                    return Err(DatagenError::Transport(e.to_string()));
                }
            }
        }
    }
}

fn extract_content(value: &serde_json::Value) -> Result<String, DatagenError> {
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| {
            DatagenError::BadCompletion("missing choices[0].message.content".to_string())
        })
}

/// Runs `generate_pair` for every prompt with at most `max_concurrency`
/// prompts in flight. Per-prompt isolation: one prompt's failure is recorded
/// without touching the others.
#[allow(clippy::too_many_arguments)]
pub(super) fn generate_all(
    http: &HttpBackend,
    backend: &GenerationBackend,
    template: &PrefixTemplate,
    rules: &CleaningRuleSet,
    prompts: &[&Prompt],
    rejected_score: u8,
    iteration: usize,
    master_seed: u64,
) -> Vec<(PromptId, Result<PairOutcome, DatagenError>)> {
    let workers = http.max_concurrency.max(1).min(prompts.len().max(1));
    let queue: Mutex<std::collections::VecDeque<&Prompt>> =
        Mutex::new(prompts.iter().copied().collect());
    let results: Mutex<Vec<(PromptId, Result<PairOutcome, DatagenError>)>> =
        Mutex::new(Vec::with_capacity(prompts.len()));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let prompt = match queue.lock().unwrap().pop_front() {
                    Some(p) => p,
                    None => break,
                };
                let mut rng = super::prompt_rng(master_seed, iteration, &prompt.id);
                let outcome = generate_pair(
                    backend,
                    template,
                    rules,
                    prompt,
                    rejected_score,
                    iteration,
                    &mut rng,
                );
                results.lock().unwrap().push((prompt.id.clone(), outcome));
            });
        }
    });
    results.into_inner().unwrap()
}
