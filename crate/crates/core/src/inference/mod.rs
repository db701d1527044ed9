//! Collecting model predictions from a text-generation service.
//!
//! Every request is greedy with log-probabilities enabled. Responses are
//! cached on disk keyed by a content hash of everything that affects the
//! generated text, so warm reruns make no network calls.

mod cache;
mod client;
mod prompt;
mod runner;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cache::{CacheKey, CachedResponse, ResponseCache};
pub use client::{
    Endpoint, GenerateRequestBody, GenerateResponseBody, GenerationClient, GenerationOutput,
    Generator, RetryPolicy, AUTH_TOKEN_ENV, GENERATE_PATH,
};
pub use prompt::{
    build_fewshot_balanced_prompt, build_instruct_prompt, build_zeroshot_prompt, FewShotExample,
    FewShotPool, PromptBuilder, DEFAULT_ZEROSHOT_TEMPLATE, IDK_ANSWER, INSTRUCTION,
    QUESTION_PLACEHOLDER,
};
pub use runner::{run_corpus, PartialProgress};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub decoding: Decoding,
    pub want_logprobs: bool,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, max_new_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            decoding: Decoding::Greedy,
            want_logprobs: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    ZeroshotQa,
    FewshotBalanced,
    InstructIdk,
}

impl PromptStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::ZeroshotQa => "zeroshot-qa",
            PromptStyle::FewshotBalanced => "fewshot-balanced",
            PromptStyle::InstructIdk => "instruct-idk",
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroshot-qa" => Ok(PromptStyle::ZeroshotQa),
            "fewshot-balanced" => Ok(PromptStyle::FewshotBalanced),
            "instruct-idk" => Ok(PromptStyle::InstructIdk),
            other => Err(Error::Config(format!("unknown prompt style `{other}`"))),
        }
    }
}

/// A model's generated answer for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub record_id: String,
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub perplexity: f64,
    pub model_tag: String,
    pub prompt_style: PromptStyle,
}

impl Prediction {
    pub fn new(
        record_id: impl Into<String>,
        text: impl Into<String>,
        token_logprobs: Vec<f64>,
        model_tag: impl Into<String>,
        prompt_style: PromptStyle,
    ) -> Result<Self> {
        let perplexity = perplexity(&token_logprobs)?;
        Ok(Self {
            record_id: record_id.into(),
            text: text.into(),
            token_logprobs,
            perplexity,
            model_tag: model_tag.into(),
            prompt_style,
        })
    }

    pub fn log_perplexity(&self) -> f64 {
        self.perplexity.ln()
    }
}

/// Sequence perplexity `exp(-mean(logprobs))`.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::Domain(
            "perplexity of an empty log-probability list".to_string(),
        ));
    }
    if let Some(bad) = token_logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
        return Err(Error::Domain(format!(
            "token log-probability {bad} is not a finite value <= 0"
        )));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        let e = std::f64::consts::E;
        assert!((perplexity(&[-1.0, -1.0, -1.0]).unwrap() - e).abs() < 1e-12);
        assert!((perplexity(&[-0.5, -1.5]).unwrap() - e).abs() < 1e-12);
        assert!((perplexity(&[-0.1, -0.2]).unwrap() - 1.161_834_242_728_283).abs() < 1e-12);
    }

    #[test]
    fn perplexity_rejects_empty_and_positive() {
        assert!(matches!(perplexity(&[]), Err(Error::Domain(_))));
        assert!(matches!(perplexity(&[0.3]), Err(Error::Domain(_))));
        assert!(matches!(perplexity(&[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn prediction_wire_field_names() {
        let p = Prediction::new("q1", "Paris", vec![-0.1], "m", PromptStyle::ZeroshotQa).unwrap();
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["id"], "q1");
        assert_eq!(v["prompt_style"], "zeroshot-qa");
    }

    proptest! {
        #[test]
        fn perplexity_bounds_and_permutation(
            mut lps in proptest::collection::vec(-20.0f64..=0.0, 1..40),
        ) {
            let p = perplexity(&lps).unwrap();
            prop_assert!(p >= 1.0);
            let mean = lps.iter().sum::<f64>() / lps.len() as f64;
            if lps.iter().all(|&x| x == 0.0) {
                prop_assert_eq!(p, 1.0);
            } else if mean < -1e-12 {
                prop_assert!(p > 1.0);
            }
            lps.reverse();
            let q = perplexity(&lps).unwrap();
            prop_assert!((p - q).abs() <= 1e-9 * p);
        }
    }
}
