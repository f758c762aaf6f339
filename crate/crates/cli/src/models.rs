use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use iris_gate::detector::onnx::OnnxOptions;
use iris_gate::detector::{
    load_external, Detector, HeuristicLighting, HeuristicLightingConfig, LogisticModel,
};
use serde::Serialize;

use crate::config::{TierBackend, TierConfig};

/// A ready detector plus what the service reports about it.
#[derive(Clone)]
pub struct LoadedDetector {
    pub detector: Arc<dyn Detector>,
    pub backend: TierBackend,
    pub model: Option<String>,
    /// Input side the detector requires; `None` accepts any.
    pub input_side: Option<u32>,
}

impl std::fmt::Debug for LoadedDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedDetector")
            .field("backend", &self.backend)
            .field("model", &self.model)
            .field("threshold", &self.detector.threshold())
            .finish()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectorInfo {
    pub backend: TierBackend,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl LoadedDetector {
    pub fn info(&self) -> DetectorInfo {
        DetectorInfo {
            backend: self.backend,
            threshold: self.detector.threshold(),
            model: self.model.clone(),
        }
    }

    pub fn logistic(model: LogisticModel, source: Option<String>) -> Self {
        let side = model.preprocess.target_side;
        Self {
            detector: Arc::new(model),
            backend: TierBackend::Logistic,
            model: source,
            input_side: Some(side),
        }
    }

    pub fn heuristic(detector: HeuristicLighting) -> Self {
        Self {
            detector: Arc::new(detector),
            backend: TierBackend::Heuristic,
            model: None,
            input_side: None,
        }
    }
}

/// Loads one tier as configured.
pub fn load_tier(cfg: &TierConfig) -> anyhow::Result<LoadedDetector> {
    let path = cfg.model.as_deref();
    let label = path.map(|p| p.display().to_string());
    match cfg.backend {
        TierBackend::Logistic => {
            let path = path.context("logistic backend needs a model path")?;
            let mut model = LogisticModel::load(path)
                .with_context(|| format!("cannot load logistic model {}", path.display()))?;
            if let Some(t) = cfg.threshold {
                model = model.with_threshold(t);
            }
            Ok(LoadedDetector::logistic(model, label))
        }
        TierBackend::Onnx => {
            let path = path.context("onnx backend needs a model path")?;
            let mut options = OnnxOptions::default();
            if let Some(t) = cfg.threshold {
                options.threshold = t;
            }
            if let Some(i) = cfg.positive_index {
                options.positive_index = i;
            }
            if let Some(p) = &cfg.preprocess {
                options.preprocess = p.clone();
            }
            let side = options.preprocess.target_side;
            let detector = load_external(path, options)
                .with_context(|| format!("cannot load onnx model {}", path.display()))?;
            Ok(LoadedDetector {
                detector: Arc::new(detector),
                backend: TierBackend::Onnx,
                model: label,
                input_side: Some(side),
            })
        }
        TierBackend::Heuristic => {
            let detector = HeuristicLighting::new(
                cfg.heuristic.unwrap_or_default(),
                cfg.threshold.unwrap_or(0.0),
            )?;
            Ok(LoadedDetector::heuristic(detector))
        }
    }
}

/// Command-line model selection: `heuristic`, a path ending in `.onnx`, or
/// a logistic model JSON file.
pub fn detector_from_path(arg: &str) -> anyhow::Result<LoadedDetector> {
    let path = Path::new(arg);
    let backend = if arg == "heuristic" {
        TierBackend::Heuristic
    } else if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("onnx"))
    {
        TierBackend::Onnx
    } else {
        TierBackend::Logistic
    };
    load_tier(&TierConfig {
        backend,
        model: (backend != TierBackend::Heuristic).then(|| path.to_path_buf()),
        threshold: None,
        positive_index: None,
        preprocess: None,
        heuristic: None::<HeuristicLightingConfig>,
    })
}

/// The single input side both tiers accept.
pub fn common_side(a: &LoadedDetector, b: &LoadedDetector, fallback: u32) -> anyhow::Result<u32> {
    match (a.input_side, b.input_side) {
        (Some(x), Some(y)) if x != y => {
            bail!("tier inputs disagree: tier 1 expects side {x}, tier 2 side {y}")
        }
        (Some(x), _) | (None, Some(x)) => Ok(x),
        (None, None) => Ok(fallback),
    }
}
