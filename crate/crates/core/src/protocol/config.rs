use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{HeuristicLightingConfig, LogisticModel, DEFAULT_THRESHOLD};
use crate::imaging::PreprocessConfig;

use super::{
    HyperParams, ProtocolError, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_RATIOS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Trainable logistic reference detector.
    #[default]
    Logistic,
    /// Fixed lighting rule; evaluated on the same splits without training.
    Heuristic,
}

/// When the hyperparameter grid is searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// On the first repetition's split; the winner is reused for all runs.
    #[default]
    Once,
    /// Separately on every repetition's split.
    PerRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lr: Vec<f64>,
    pub momentum: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lr: vec![1e-4, 2e-4],
            momentum: vec![0.95, 0.99],
        }
    }
}

impl GridConfig {
    /// Cartesian product, learning rate major.
    pub fn pairs(&self) -> Result<Vec<HyperParams>, ProtocolError> {
        let mut out = Vec::with_capacity(self.lr.len() * self.momentum.len());
        for &lr in &self.lr {
            for &momentum in &self.momentum {
                out.push(HyperParams::new(lr, momentum)?);
            }
        }
        if out.is_empty() {
            return Err(ProtocolError::EmptyGrid);
        }
        Ok(out)
    }
}

/// Experiment description, read from TOML.
///
/// ```toml
/// manifest = "tier1.csv"   # id,path,label; relative to this file
/// ratios = [8, 1, 1]
/// base_seed = 0
/// repetitions = 5
/// epochs = 20
/// batch_size = 32
/// grid_search = "once"     # or "per_run"
/// backend = "logistic"     # or "heuristic"
/// threshold = 0.5
///
/// [grid]
/// lr = [1e-4, 2e-4]
/// momentum = [0.95, 0.99]
///
/// [preprocess]
/// target_side = 224
/// normalization = "identity"
/// wavelet_levels = 0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub ratios: [u32; 3],
    pub base_seed: u64,
    pub repetitions: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub grid_search: GridMode,
    pub backend: Backend,
    pub threshold: f64,
    pub grid: GridConfig,
    pub preprocess: PreprocessConfig,
    pub heuristic: HeuristicLightingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            ratios: DEFAULT_RATIOS,
            base_seed: 0,
            repetitions: 5,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            grid_search: GridMode::Once,
            backend: Backend::Logistic,
            threshold: DEFAULT_THRESHOLD,
            grid: GridConfig::default(),
            preprocess: PreprocessConfig::raw(),
            heuristic: HeuristicLightingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ProtocolError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ProtocolError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative `manifest` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProtocolError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(m) = cfg.manifest.as_mut() {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new("")).join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.ratios.contains(&0) {
            return Err(ProtocolError::InvalidRatios(self.ratios));
        }
        if self.repetitions == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(ProtocolError::InvalidConfig(
                "repetitions, epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        self.grid.pairs()?;
        self.preprocess.validate()?;
        self.heuristic.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    /// Untrained logistic model with this experiment's preprocessing.
    pub fn base_model(&self) -> LogisticModel {
        LogisticModel::new(self.preprocess.clone()).with_threshold(self.threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Normalization;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.grid.pairs().unwrap().len(), 4);
        assert_eq!(cfg.preprocess.normalization, Normalization::Identity);
        let cfg = ExperimentConfig::from_toml_str(
            "epochs = 3\ngrid_search = \"per_run\"\n[grid]\nlr = [0.1]\nmomentum = [0.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.grid_search, GridMode::PerRun);
        assert_eq!(
            cfg.grid.pairs().unwrap(),
            vec![HyperParams::new(0.1, 0.0).unwrap()]
        );
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "ratios = [8, 0, 1]",
            "epochs = 0",
            "threshold = 1.5",
            "unknown_key = 1",
            "[grid]\nlr = []\nmomentum = [0.9]",
            "[grid]\nlr = [0.1]\nmomentum = [1.0]",
        ] {
            assert!(ExperimentConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn manifest_resolves_next_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        std::fs::write(&p, "manifest = \"data/tier1.csv\"\n").unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.manifest.unwrap(), dir.path().join("data/tier1.csv"));
    }
}
