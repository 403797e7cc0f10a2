//! Experiment configuration file: one JSON document, CLI flags win.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use progtx_core::simulator::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub snr_index: usize,
    pub realization: usize,
    pub window_ms: f64,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        SnapshotConfig {
            snr_index: 0,
            realization: 0,
            window_ms: 300.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabConfig {
    /// Corpus manifest path, relative to the data root.
    pub corpus_manifest: PathBuf,
    /// Where training artifacts are written/read, relative to the data root.
    pub artifacts_dir: PathBuf,
    /// Where simulation outputs land, relative to the data root.
    pub output_dir: PathBuf,

    #[serde(default = "default_block")]
    pub block: usize,
    /// Quantizer step = quality * channel scale.
    #[serde(default = "default_quality")]
    pub quality: f64,

    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_large_codebook")]
    pub large_codebook_size: usize,
    #[serde(default = "default_family_min")]
    pub family_bpi_min: u8,
    #[serde(default = "default_family_max")]
    pub family_bpi_max: u8,
    #[serde(default = "default_stack_stages")]
    pub stack_stages: usize,
    #[serde(default = "default_stack_bpi")]
    pub stack_bpi: u8,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_max_iters: usize,
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,

    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub snapshot: SnapshotConfig,
}

fn default_block() -> usize {
    progtx_core::masking::DEFAULT_BLOCK
}
fn default_quality() -> f64 {
    progtx_core::masking::DEFAULT_QUALITY
}
fn default_patch() -> usize {
    progtx_core::rvq::DEFAULT_PATCH
}
fn default_embed_dim() -> usize {
    progtx_core::rvq::DEFAULT_EMBED_DIM
}
fn default_large_codebook() -> usize {
    16_384
}
fn default_family_min() -> u8 {
    8
}
fn default_family_max() -> u8 {
    12
}
fn default_stack_stages() -> usize {
    10
}
fn default_stack_bpi() -> u8 {
    8
}
fn default_kmeans_iters() -> usize {
    100
}
fn default_train_seed() -> u64 {
    7
}

impl LabConfig {
    /// Parses the config; JSON syntax errors surface with line/column info.
    pub fn load(path: &Path) -> Result<LabConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: LabConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow!("config {} parse error: {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.patch == 0 {
            return Err(anyhow!("block and patch sizes must be >= 1"));
        }
        // Channel ids travel as u16; 3 * block^2 must stay within range.
        if self.block > 64 {
            return Err(anyhow!("block size {} too large (max 64)", self.block));
        }
        if !(self.quality > 0.0) {
            return Err(anyhow!("quality must be > 0"));
        }
        if !self.large_codebook_size.is_power_of_two() {
            return Err(anyhow!(
                "large_codebook_size {} must be a power of two",
                self.large_codebook_size
            ));
        }
        if self.family_bpi_min > self.family_bpi_max {
            return Err(anyhow!("family bpi range is empty"));
        }
        if (1usize << self.family_bpi_max) > self.large_codebook_size {
            return Err(anyhow!(
                "family_bpi_max {} needs {} entries but the large codebook has {}",
                self.family_bpi_max,
                1usize << self.family_bpi_max,
                self.large_codebook_size
            ));
        }
        if self.stack_stages == 0 {
            return Err(anyhow!("stack_stages must be >= 1"));
        }
        Ok(())
    }
}

/// Filenames inside the artifacts directory.
pub struct ArtifactPaths {
    pub ranking: PathBuf,
    pub scales: PathBuf,
    pub projector: PathBuf,
    pub large_codebook: PathBuf,
    pub stack: PathBuf,
    pub family_dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(artifacts_dir: &Path) -> Self {
        ArtifactPaths {
            ranking: artifacts_dir.join("ranking.json"),
            scales: artifacts_dir.join("scales.json"),
            projector: artifacts_dir.join("projector.json"),
            large_codebook: artifacts_dir.join("large_codebook.rvq1"),
            stack: artifacts_dir.join("stack.rvq1"),
            family_dir: artifacts_dir.to_path_buf(),
        }
    }

    pub fn family_file(&self, bpi: u8) -> PathBuf {
        self.family_dir.join(format!("family_bpi{bpi:02}.rvq1"))
    }
}
