//! Run configuration files.

use serde::{de::DeserializeOwned, Deserialize};
use std::path::{Path, PathBuf};

use explainrl::pareto::PreferenceConstraint;
use explainrl::prompts::EmbedderConfig;
use explainrl::rewards::ChatConfig;
use explainrl::trainer::TrainConfig;

/// Invalid input from the user; the process exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Corpus directory.
    pub data: PathBuf,
    /// Where checkpoints and reports go.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub provider: ProviderConfig,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Simulated {
        #[serde(default)]
        lexicon: Option<PathBuf>,
    },
    Remote {
        #[serde(default)]
        chat: ChatConfig,
        /// Remote embeddings; the local hashing embedder when absent.
        #[serde(default)]
        embedder: Option<EmbedderConfig>,
        #[serde(default)]
        prototypes: Option<PathBuf>,
        /// Lexicon of the probe's simulated rubric.
        #[serde(default)]
        lexicon: Option<PathBuf>,
    },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Simulated { lexicon: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParetoRequest {
    pub grads: Vec<Vec<f64>>,
    /// One floor of 0.2 per objective when absent.
    #[serde(default)]
    pub constraints: Option<Vec<PreferenceConstraint>>,
}

/// Deserializes JSON, naming the offending field path on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, UsageError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        UsageError(format!("{origin}: at `{path}`: {}", e.into_inner()))
    })
}

pub fn load_config(path: &Path) -> Result<AppConfig, UsageError> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("reading {}: {e}", path.display())))?;
    parse_json(&text, &path.display().to_string())
}
