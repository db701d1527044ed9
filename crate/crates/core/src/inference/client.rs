//! HTTP client for the generation endpoint.
//!
//! Wire contract: `POST <base>/generate` with a JSON body
//! `{model, prompt, max_new_tokens, temperature, do_sample, logprobs, request_id}`;
//! the response is `{text, token_logprobs}` where `token_logprobs` holds one
//! natural-log probability per generated token.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::cache::{CacheKey, CachedResponse, ResponseCache};
use super::{Decoding, GenerationRequest};
use crate::error::{Error, Result};

pub const GENERATE_PATH: &str = "/generate";

/// Environment variable holding the bearer token sent to the endpoint.
pub const AUTH_TOKEN_ENV: &str = "HALM_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequestBody {
    pub model: String,
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub do_sample: bool,
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponseBody {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub text: String,
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub base_url: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            auth_token: None,
            timeout: Duration::from_secs(60),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_token_from_env(mut self) -> Self {
        self.auth_token = std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty());
        self
    }

    fn generate_url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), GENERATE_PATH)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(16)).unwrap_or(u32::MAX);
        self.initial_backoff
            .saturating_mul(factor)
            .min(self.max_backoff)
    }
}

enum AttemptError {
    Transient(String),
    Fatal(Error),
}

/// Bare network client with retries; no caching.
#[derive(Debug, Clone)]
pub struct GenerationClient {
    http: reqwest::Client,
    endpoint: Endpoint,
    retry: RetryPolicy,
}

impl GenerationClient {
    pub fn new(endpoint: Endpoint, retry: RetryPolicy) -> Result<Self> {
        let http = reqwest::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            http,
            endpoint,
            retry,
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    async fn attempt(&self, body: &GenerateRequestBody) -> std::result::Result<GenerateResponseBody, AttemptError> {
        let mut req = self.http.post(self.endpoint.generate_url()).json(body);
        if let Some(token) = &self.endpoint.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(AttemptError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let detail = resp.text().await.unwrap_or_default();
            return Err(AttemptError::Fatal(Error::Transport {
                record_id: None,
                message: format!("HTTP {status}: {detail}"),
            }));
        }
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| {
            AttemptError::Fatal(Error::Protocol {
                record_id: None,
                message: e.to_string(),
            })
        })
    }

    /// Sends one greedy request, retrying transient failures with exponential backoff.
    pub async fn generate(
        &self,
        model_tag: &str,
        request: &GenerationRequest,
        record_id: Option<&str>,
    ) -> Result<GenerationOutput> {
        let body = GenerateRequestBody {
            model: model_tag.to_string(),
            prompt: request.prompt.clone(),
            max_new_tokens: request.max_new_tokens,
            temperature: 0.0,
            do_sample: false,
            logprobs: true,
            request_id: record_id.map(str::to_string),
        };
        let mut attempt = 0;
        let resp = loop {
            match self.attempt(&body).await {
                Ok(resp) => break resp,
                Err(AttemptError::Fatal(e)) => return Err(tag(e, record_id)),
                Err(AttemptError::Transient(message)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(tag(
                            Error::Transport {
                                record_id: None,
                                message: format!(
                                    "{message} (gave up after {} attempt(s))",
                                    attempt + 1
                                ),
                            },
                            record_id,
                        ));
                    }
                    let wait = self.retry.backoff(attempt);
                    warn!(record = record_id.unwrap_or("-"), %message, ?wait, "retrying generation request");
                    tokio::time::sleep(wait).await;
                    attempt += 1;
                }
            }
        };
        validate_response(resp).map_err(|e| tag(e, record_id))
    }
}

fn tag(e: Error, record_id: Option<&str>) -> Error {
    match record_id {
        Some(id) => e.with_record(id),
        None => e,
    }
}

fn validate_response(resp: GenerateResponseBody) -> Result<GenerationOutput> {
    let token_logprobs = match resp.token_logprobs {
        Some(lps) if !lps.is_empty() => lps,
        _ => return Err(Error::Capability { record_id: None }),
    };
    if let Some(bad) = token_logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
        return Err(Error::Protocol {
            record_id: None,
            message: format!("token log-probability {bad} is not a finite value <= 0"),
        });
    }
    Ok(GenerationOutput {
        text: resp.text,
        token_logprobs,
    })
}

/// Client plus on-disk cache, bound to one model tag.
#[derive(Debug, Clone)]
pub struct Generator {
    client: GenerationClient,
    cache: Option<ResponseCache>,
    model_tag: String,
}

impl Generator {
    pub fn new(client: GenerationClient, cache: Option<ResponseCache>, model_tag: impl Into<String>) -> Self {
        Self {
            client,
            cache,
            model_tag: model_tag.into(),
        }
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub async fn generate(
        &self,
        request: &GenerationRequest,
        record_id: Option<&str>,
    ) -> Result<GenerationOutput> {
        if request.decoding != Decoding::Greedy || !request.want_logprobs {
            return Err(Error::Config(
                "only greedy requests with log-probabilities are supported".to_string(),
            ));
        }
        if request.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".to_string()));
        }
        let key = CacheKey::new(&self.model_tag, request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                debug!(key = key.as_str(), "cache hit");
                return Ok(GenerationOutput {
                    text: hit.text,
                    token_logprobs: hit.token_logprobs,
                });
            }
        }
        let out = self
            .client
            .generate(&self.model_tag, request, record_id)
            .await?;
        if let Some(cache) = &self.cache {
            cache.put(&CachedResponse {
                key: key.as_str().to_string(),
                model_tag: self.model_tag.clone(),
                prompt: request.prompt.clone(),
                max_new_tokens: request.max_new_tokens,
                decoding: request.decoding,
                text: out.text.clone(),
                token_logprobs: out.token_logprobs.clone(),
            })?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(350),
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(350));
        assert_eq!(p.backoff(40), Duration::from_millis(350));
    }

    #[test]
    fn missing_or_empty_logprobs_is_capability_error() {
        for lps in [None, Some(vec![])] {
            let err = validate_response(GenerateResponseBody {
                text: "Paris".into(),
                token_logprobs: lps,
            })
            .unwrap_err();
            assert!(matches!(err, Error::Capability { .. }));
        }
    }

    #[test]
    fn positive_logprob_is_protocol_error() {
        let err = validate_response(GenerateResponseBody {
            text: "x".into(),
            token_logprobs: Some(vec![-0.1, 0.5]),
        })
        .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }));
    }

    #[test]
    fn request_body_omits_absent_request_id() {
        let body = GenerateRequestBody {
            model: "m".into(),
            prompt: "p".into(),
            max_new_tokens: 4,
            temperature: 0.0,
            do_sample: false,
            logprobs: true,
            request_id: None,
        };
        let v = serde_json::to_value(&body).unwrap();
        assert!(v.get("request_id").is_none());
        assert_eq!(v["logprobs"], true);
    }
}
