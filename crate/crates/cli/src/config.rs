use std::path::{Path, PathBuf};

use anyhow::Context;
use infofuse_core::corpus::SplitRatios;
use infofuse_core::enrichment::vlm::{EndpointConfig, RetryPolicy};
use infofuse_core::enrichment::PromptSpec;
use infofuse_core::evaluator::BprMfConfig;
use infofuse_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Everything a command reads, loaded from TOML and then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the split, model initialization and negative sampling.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub endpoint: EndpointSection,
    pub prompt: PromptSection,
    pub train: TrainConfig,
    pub bpr_mf: BprMfConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub interactions: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    /// Delimited `item<TAB>f1 f2 ...` file of pre-extracted image features.
    pub raw_visual: Option<PathBuf>,
    /// Base for relative image paths; defaults to the metadata file's directory.
    pub images_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            metadata: None,
            raw_visual: None,
            images_dir: None,
            cache_dir: None,
            output_dir: PathBuf::from("infofuse-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kcore: usize,
    pub split: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kcore: 5,
            split: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Hashing,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output width of the hashing encoder.
    pub dim: usize,
    /// `/v1/embeddings` endpoint for the `http` kind.
    pub url: Option<String>,
    pub model: Option<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Hashing,
            dim: 384,
            url: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub concurrency: usize,
    pub retries: u32,
    pub initial_backoff_ms: u64,
}

impl Default for EndpointSection {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "llava-v1.6-mistral-7b".into(),
            temperature: 0.0,
            timeout_secs: 120,
            max_tokens: 512,
            concurrency: 4,
            retries: 3,
            initial_backoff_ms: 1000,
        }
    }
}

impl EndpointSection {
    pub fn endpoint(&self) -> EndpointConfig {
        EndpointConfig {
            url: self.url.clone(),
            model: self.model.clone(),
            temperature: self.temperature,
            timeout_secs: self.timeout_secs,
            max_tokens: self.max_tokens,
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retries.max(1),
            initial_backoff: std::time::Duration::from_millis(self.initial_backoff_ms),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub template_id: Option<String>,
    /// Must contain `{title}` exactly once.
    pub template: Option<String>,
    pub version: Option<u32>,
    /// Text after the last occurrence of this marker is kept as the description.
    pub description_marker: Option<String>,
}

impl PromptSection {
    pub fn spec(&self) -> infofuse_core::Result<PromptSpec> {
        let default = PromptSpec::default();
        PromptSpec::new(
            self.template_id.clone().unwrap_or(default.template_id),
            self.template.clone().unwrap_or(default.template_text),
            self.version.unwrap_or(default.version),
        )
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            return Err(UsageError(format!("config file {} does not exist", path.display())).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// Train settings with the shared seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed(),
            ..self.train.clone()
        }
    }

    pub fn bpr_mf_config(&self) -> BprMfConfig {
        BprMfConfig {
            seed: self.seed(),
            ..self.bpr_mf.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache_dir.clone().unwrap_or_else(|| self.paths.output_dir.join("cache"))
    }

    pub fn images_dir(&self) -> PathBuf {
        if let Some(dir) = &self.paths.images_dir {
            return dir.clone();
        }
        self.paths
            .metadata
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Resolve a required input path, failing with a usage error naming it.
pub fn require_input(path: Option<&Path>, what: &str, key: &str) -> anyhow::Result<PathBuf> {
    let path = path.ok_or_else(|| UsageError(format!("no {what} configured; set paths.{key} or pass --{}", key.replace('_', "-"))))?;
    if !path.exists() {
        return Err(UsageError(format!("{what} file {} does not exist", path.display())).into());
    }
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.batch_size, 1024);
        assert_eq!(c.data.kcore, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nbatchsize = 3").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.seed = Some(9);
        c.train.arm = infofuse_core::trainer::AblationArm::Concat;
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train_config().seed, 9);
    }
}
