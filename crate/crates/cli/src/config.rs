//! Experiment configuration: one TOML file aggregating the model,
//! prompt, protocol, training and corpus settings plus output locations.
//! Unknown keys are rejected so typos fail loudly, and every run writes
//! the resolved config next to its outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voplab_core::corpus::CorpusConfig;
use voplab_core::model::ModelSpec;
use voplab_core::prompts::{CmmKind, PromptSpec};
use voplab_core::protocols::{default_prompts_for, Protocol};
use voplab_core::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Inclusive layer ranges for the depth axis.
    #[serde(default)]
    pub depth_grid: Option<Vec<(usize, usize)>>,
    /// Prompt lengths for the length axis (applied to both towers).
    #[serde(default)]
    pub length_grid: Option<Vec<usize>>,
    /// Video-specific token counts for the video_len axis.
    #[serde(default)]
    pub video_len_grid: Option<Vec<usize>>,
    /// Split depths for the k_split axis.
    #[serde(default)]
    pub k_split_grid: Option<Vec<usize>>,
    /// CMM choices for the cmm axis.
    #[serde(default)]
    pub cmm_grid: Option<Vec<CmmKind>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where outputs land unless --out overrides.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Dataset directory consumed by train/ablate.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub model: Option<ModelSpec>,
    pub prompts: Option<PromptSpec>,
    pub protocol: Option<Protocol>,
    pub train: Option<TrainConfig>,
    pub corpus: Option<CorpusConfig>,
    pub ablate: Option<AblateConfig>,
    /// Protocols for count-params; defaults to all of them.
    #[serde(default)]
    pub count_protocols: Option<Vec<String>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<&ModelSpec> {
        self.model.as_ref().context("config needs a [model] section")
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.protocol.context("config needs a [protocol] section")
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().context("config needs a [train] section")
    }

    pub fn corpus(&self) -> Result<&CorpusConfig> {
        self.corpus.as_ref().context("config needs a [corpus] section")
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().context("config needs data_dir")
    }

    /// Prompt spec: explicit section, or the protocol's defaults.
    pub fn resolved_prompts(&self, spec: &ModelSpec, protocol: &Protocol) -> PromptSpec {
        match &self.prompts {
            Some(p) => p.clone(),
            None => default_prompts_for(protocol.kind, spec),
        }
    }

    pub fn out_dir(&self, cli_out: Option<&Path>) -> Result<PathBuf> {
        if let Some(out) = cli_out {
            return Ok(out.to_path_buf());
        }
        match &self.out_dir {
            Some(d) => Ok(d.clone()),
            None => bail!("no output directory: set out_dir in the config or pass --out"),
        }
    }

    /// Echo the fully resolved configuration next to the outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(out_dir.join("config.resolved.toml"), text)?;
        Ok(())
    }
}

/// Worker cap for ablation sweeps, from VOPLAB_THREADS (default 1).
pub fn worker_threads() -> usize {
    std::env::var("VOPLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
