use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use iris_gate::detector::HeuristicLightingConfig;
use iris_gate::imaging::{PreprocessConfig, DEFAULT_SIDE};
use serde::{Deserialize, Serialize};

/// Environment variable consulted when no config path is given.
pub const CONFIG_ENV: &str = "IRIS_GATE_CONFIG";
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierBackend {
    Logistic,
    Onnx,
    Heuristic,
}

/// One tier's detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierConfig {
    pub backend: TierBackend,
    /// Model file; relative paths are resolved against the config file.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Overrides the threshold stored with the model.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// ONNX only: index of the positive logit.
    #[serde(default)]
    pub positive_index: Option<usize>,
    /// ONNX only: input normalization; ImageNet statistics by default.
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    /// Heuristic only.
    #[serde(default)]
    pub heuristic: Option<HeuristicLightingConfig>,
}

/// Service configuration, read from TOML.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// max_upload_bytes = 10485760
/// target_side = 224
///
/// [tier1]
/// backend = "logistic"
/// model = "tier1.json"
///
/// [tier2]
/// backend = "heuristic"
/// threshold = 0.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    #[serde(default = "default_max_upload")]
    pub max_upload_bytes: usize,
    /// Side of the square detector input.
    #[serde(default = "default_side")]
    pub target_side: u32,
    pub tier1: TierConfig,
    pub tier2: TierConfig,
}

fn default_max_upload() -> usize {
    DEFAULT_MAX_UPLOAD_BYTES
}

fn default_side() -> u32 {
    DEFAULT_SIDE
}

impl ServiceConfig {
    /// Parses and resolves model paths against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> anyhow::Result<Self> {
        let mut cfg: Self = toml::from_str(text).context("invalid service config")?;
        for tier in [&mut cfg.tier1, &mut cfg.tier2] {
            if let Some(m) = &tier.model {
                if m.is_relative() {
                    tier.model = Some(base.join(m));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new("")))
            .with_context(|| format!("in {}", path.display()))
    }

    /// `explicit`, else the path in `IRIS_GATE_CONFIG`.
    pub fn resolve_path(explicit: Option<&Path>) -> anyhow::Result<PathBuf> {
        match explicit {
            Some(p) => Ok(p.to_path_buf()),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
                _ => bail!("no config given; pass --config or set {CONFIG_ENV}"),
            },
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.max_upload_bytes == 0 {
            bail!("max_upload_bytes must be positive");
        }
        if self.target_side == 0 || !self.target_side.is_multiple_of(4) {
            bail!("target_side must be a positive multiple of 4");
        }
        for (name, tier) in [("tier1", &self.tier1), ("tier2", &self.tier2)] {
            let needs_model = tier.backend != TierBackend::Heuristic;
            if needs_model && tier.model.is_none() {
                bail!("{name}: backend {:?} needs a model path", tier.backend);
            }
            if let Some(t) = tier.threshold {
                if !(0.0..=1.0).contains(&t) {
                    bail!("{name}: threshold {t} outside [0, 1]");
                }
            }
        }
        if self.tier1.backend == TierBackend::Heuristic {
            bail!("tier1: the heuristic backend only judges lighting");
        }
        Ok(())
    }
}
