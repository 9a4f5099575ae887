//! Engine configuration, read from a TOML file. Unknown keys are rejected.
//!
//! ```toml
//! store_path = "irec-store.json"
//! api_address = "127.0.0.1:7878"
//!
//! [embedding]
//! provider = "hashing"   # or "external"
//! dim = 256
//!
//! [llm]
//! provider = "stub"      # or "external"
//! fixtures_dir = "fixtures/llm"
//!
//! [recall]
//! k = 50
//! merge_weights = { vector = 0.5, fulltext = 0.3, tag = 0.2 }
//!
//! [timeouts]
//! embed_ms = 10000
//! llm_ms = 30000
//! recall_ms = 5000
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, ExternalEmbedder, HashingEmbedder};
use crate::llm::{FilterThresholds, GatewayConfig, HttpLlm, LlmProvider, ScriptedLlm, DEFAULT_SIMILARITY_RUBRIC, DEFAULT_TUTOR_DIRECTIVE};
use crate::recall::RecallConfig;
use crate::rerank::SignalParams;
use crate::tagmap::DEFAULT_TOP_N;

pub const CONFIG_ENV: &str = "IREC_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProvider {
    Hashing,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProvider,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { provider: EmbeddingProvider::Hashing, dim: 256, endpoint: None, model: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmProviderKind {
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub provider: LlmProviderKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub fixtures_dir: Option<PathBuf>,
    pub tutor_directive: String,
    pub similarity_rubric: String,
    pub strict_threshold: u8,
    pub loose_threshold: u8,
    pub assess_top: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        let t = FilterThresholds::default();
        Self {
            provider: LlmProviderKind::Stub,
            endpoint: None,
            model: None,
            fixtures_dir: None,
            tutor_directive: DEFAULT_TUTOR_DIRECTIVE.into(),
            similarity_rubric: DEFAULT_SIMILARITY_RUBRIC.into(),
            strict_threshold: t.strict,
            loose_threshold: t.loose,
            assess_top: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeoutConfig {
    pub embed_ms: u64,
    pub llm_ms: u64,
    pub recall_ms: u64,
}

impl Default for TimeoutConfig {
    fn default() -> Self {
        Self { embed_ms: 10_000, llm_ms: 30_000, recall_ms: 5_000 }
    }
}

impl TimeoutConfig {
    pub fn embed(&self) -> Duration {
        Duration::from_millis(self.embed_ms)
    }

    pub fn llm(&self) -> Duration {
        Duration::from_millis(self.llm_ms)
    }

    pub fn recall(&self) -> Duration {
        Duration::from_millis(self.recall_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TagMapperConfig {
    pub top_n: usize,
}

impl Default for TagMapperConfig {
    fn default() -> Self {
        Self { top_n: DEFAULT_TOP_N }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub store_path: PathBuf,
    pub api_address: String,
    pub embedding: EmbeddingConfig,
    pub llm: LlmConfig,
    pub recall: RecallConfig,
    pub rerank: SignalParams,
    pub timeouts: TimeoutConfig,
    pub tag_mapper: TagMapperConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store_path: PathBuf::from("irec-store.json"),
            api_address: "127.0.0.1:7878".into(),
            embedding: EmbeddingConfig::default(),
            llm: LlmConfig::default(),
            recall: RecallConfig::default(),
            rerank: SignalParams::default(),
            timeouts: TimeoutConfig::default(),
            tag_mapper: TagMapperConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, else the file named by `IREC_CONFIG`, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let path = path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.embedding.dim == 0 {
            return invalid("embedding.dim must be positive");
        }
        if self.embedding.provider == EmbeddingProvider::External && self.embedding.endpoint.is_none() {
            return invalid("embedding.endpoint is required for the external provider");
        }
        if self.llm.provider == LlmProviderKind::External && self.llm.endpoint.is_none() {
            return invalid("llm.endpoint is required for the external provider");
        }
        if self.llm.strict_threshold > 3 || self.llm.loose_threshold > 3 {
            return invalid("filter thresholds must lie in 0..=3");
        }
        if self.llm.strict_threshold > self.llm.loose_threshold {
            return invalid("llm.strict_threshold must not exceed llm.loose_threshold");
        }
        self.recall.effective_weights().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.rerank.k_acc <= 0.0 || self.rerank.t_half_days <= 0.0 {
            return invalid("rerank.k_acc and rerank.t_half_days must be positive");
        }
        Ok(())
    }

    /// Builds the configured embedder. The external provider uses a blocking
    /// HTTP client, so call this outside of an async context.
    pub fn build_embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match self.embedding.provider {
            EmbeddingProvider::Hashing => Arc::new(HashingEmbedder::new(self.embedding.dim)),
            EmbeddingProvider::External => Arc::new(
                ExternalEmbedder::new(
                    self.embedding.endpoint.clone().unwrap_or_default(),
                    self.embedding.model.clone().unwrap_or_default(),
                    self.embedding.dim,
                    self.timeouts.embed(),
                )
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    pub fn build_llm(&self) -> Result<Arc<dyn LlmProvider>, ConfigError> {
        Ok(match self.llm.provider {
            LlmProviderKind::Stub => {
                let stub = ScriptedLlm::new();
                if let Some(dir) = &self.llm.fixtures_dir {
                    stub.load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
                Arc::new(stub)
            }
            LlmProviderKind::External => Arc::new(HttpLlm::new(
                self.llm.endpoint.clone().unwrap_or_default(),
                self.llm.model.clone().unwrap_or_default(),
            )),
        })
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            timeout: self.timeouts.llm(),
            tutor_directive: self.llm.tutor_directive.clone(),
            similarity_rubric: self.llm.similarity_rubric.clone(),
            thresholds: FilterThresholds { strict: self.llm.strict_threshold, loose: self.llm.loose_threshold },
            assess_top: self.llm.assess_top,
        }
    }
}
