use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use segqc::loss::LossConfig;
use segqc::oracle::corpus::CorpusConfig;
use segqc::qc::ReportConfig;
use segqc::regressor::RegressorConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: Option<String>,
    pub dim: Option<usize>,
    pub file: Option<std::path::PathBuf>,
    pub template: Option<String>,
}

/// Every section is optional; command-line flags override config values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub corpus: Option<CorpusConfig>,
    pub regressor: Option<RegressorConfig>,
    pub loss: Option<LossConfig>,
    pub report: Option<ReportConfig>,
    pub embedding: Option<EmbeddingSection>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))
    }
}
