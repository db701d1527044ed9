//! Pipeline configuration file (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. Every section is optional; see the README for the full key list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use halm_core::corpus::{CorpusFormat, NormalizationProfile};
use halm_core::inference::{PromptStyle, DEFAULT_MAX_NEW_TOKENS, DEFAULT_ZEROSHOT_TEMPLATE};
use halm_core::labeler::{SearchToken, DEFAULT_SEARCH_TOKEN};
use halm_core::ppl_baseline::Calibration;
use halm_core::{Error, Result, Split};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub endpoint: EndpointConfig,
    pub prompt: PromptConfig,
    pub labels: LabelConfig,
    pub calibration: CalibrationConfig,
    pub evaluation: EvaluationConfig,
    pub paths: PathsConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            endpoint: EndpointConfig::default(),
            prompt: PromptConfig::default(),
            labels: LabelConfig::default(),
            calibration: CalibrationConfig::default(),
            evaluation: EvaluationConfig::default(),
            paths: PathsConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Defaults to `corpus`.
    pub name: Option<String>,
    /// `english` or `verbatim`.
    pub profile: String,
    pub splits: BTreeMap<Split, SourceConfig>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            name: None,
            profile: "english".to_string(),
            splits: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::CanonicalJsonl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: Option<String>,
    pub model_tag: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub max_new_tokens: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            model_tag: "base".to_string(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 4,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl EndpointConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub style: PromptStyle,
    pub template: String,
    pub k: usize,
    pub seed: u64,
    /// Masked dataset supplying few-shot demonstrations.
    pub pool: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            style: PromptStyle::ZeroshotQa,
            template: DEFAULT_ZEROSHOT_TEMPLATE.to_string(),
            k: 4,
            seed: 0,
            pool: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub search_token: String,
    /// Copied verbatim into masked-dataset manifests for the trainer.
    pub training: serde_json::Value,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            search_token: DEFAULT_SEARCH_TOKEN.to_string(),
            training: serde_json::Value::Object(Default::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub strategy: Calibration,
    pub target_rate: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            strategy: Calibration::MaxF1,
            target_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub lambda: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            cache_dir: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir)
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.paths.cache_dir.as_deref().map(|p| self.resolve(p))
    }

    pub fn profile(&self) -> Result<NormalizationProfile> {
        NormalizationProfile::by_name(&self.corpus.profile).ok_or_else(|| {
            Error::Config(format!(
                "unknown normalization profile `{}` (expected `english` or `verbatim`)",
                self.corpus.profile
            ))
        })
    }

    pub fn search_token(&self) -> Result<SearchToken> {
        SearchToken::new(self.labels.search_token.clone())
    }

    pub fn corpus_name(&self) -> &str {
        self.corpus.name.as_deref().unwrap_or("corpus")
    }

    /// Checks value ranges. Input paths are checked by the commands that read them.
    pub fn validate(&self) -> Result<()> {
        self.profile()?;
        self.search_token()?;
        if self.prompt.k == 0 || self.prompt.k % 2 != 0 {
            return Err(Error::Config(format!(
                "prompt.k must be even and positive, got {}",
                self.prompt.k
            )));
        }
        if !(self.evaluation.lambda.is_finite() && self.evaluation.lambda >= 1.0) {
            return Err(Error::Config(format!(
                "evaluation.lambda must be >= 1, got {}",
                self.evaluation.lambda
            )));
        }
        if let Some(r) = self.calibration.target_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "calibration.target_rate must lie in [0, 1], got {r}"
                )));
            }
        }
        if self.calibration.strategy == Calibration::TargetSearchRate
            && self.calibration.target_rate.is_none()
        {
            return Err(Error::Config(
                "calibration.strategy = \"target-search-rate\" needs calibration.target_rate".to_string(),
            ));
        }
        if !(self.endpoint.timeout_secs.is_finite() && self.endpoint.timeout_secs > 0.0) {
            return Err(Error::Config("endpoint.timeout_secs must be positive".to_string()));
        }
        if self.endpoint.max_in_flight == 0 {
            return Err(Error::Config("endpoint.max_in_flight must be positive".to_string()));
        }
        if self.endpoint.max_new_tokens == 0 {
            return Err(Error::Config("endpoint.max_new_tokens must be positive".to_string()));
        }
        Ok(())
    }

    /// Hash of every setting that can change an output's content. Output and
    /// cache locations and the endpoint address are left out so that the same
    /// run in another directory or against another host hashes identically.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(paths) = v.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("output_dir");
            paths.remove("cache_dir");
        }
        if let Some(ep) = v.get_mut("endpoint").and_then(|p| p.as_object_mut()) {
            ep.remove("url");
        }
        halm_core::hashing::hash_json(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file_parses() {
        let cfg: PipelineConfig = toml::from_str(
            r#"
            [corpus]
            name = "nq"
            profile = "english"
            [corpus.splits.train]
            path = "data/train.tsv"
            format = "tsv-pairs"
            [corpus.splits.dev]
            path = "data/dev.jsonl"

            [endpoint]
            url = "http://127.0.0.1:8080"
            model_tag = "t5-large"
            max_in_flight = 8

            [prompt]
            style = "fewshot-balanced"
            k = 6
            seed = 7

            [labels]
            search_token = "<search>"
            training = { method = "lora", r = 16 }

            [calibration]
            strategy = "target-search-rate"
            target_rate = 0.6

            [evaluation]
            lambda = 2.0

            [paths]
            output_dir = "runs/a"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.corpus.splits.len(), 2);
        assert_eq!(cfg.corpus.splits[&Split::Train].format, CorpusFormat::TsvPairs);
        assert_eq!(cfg.corpus.splits[&Split::Dev].format, CorpusFormat::CanonicalJsonl);
        assert_eq!(cfg.prompt.style, PromptStyle::FewshotBalanced);
        assert_eq!(cfg.labels.training["r"], 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[evaluation]\nlamda = 2.0").is_err());
    }

    #[test]
    fn odd_k_and_small_lambda_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.prompt.k = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.evaluation.lambda = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_locations_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.output_dir = PathBuf::from("elsewhere");
        b.paths.cache_dir = Some(PathBuf::from("cache"));
        b.endpoint.url = Some("http://127.0.0.1:9".into());
        assert_eq!(a.hash(), b.hash());
        b.evaluation.lambda = 2.0;
        assert_ne!(a.hash(), b.hash());
    }
}
