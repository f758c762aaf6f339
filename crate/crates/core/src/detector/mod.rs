//! Per-tier binary detectors.
//!
//! Every detector consumes the standardized input tensor (RGB planes,
//! target-sized, intensities in `[0, 1]`) and applies its own
//! normalization or transform before scoring. This lets backends with
//! different input conventions share one cascade.

mod features;
mod heuristic;
mod logistic;
pub mod onnx;

pub use features::{extract_features, FeatureVector, FEATURE_LAYOUT, FEATURE_LEN, HIST_BINS};
pub use heuristic::{heuristic_lighting, HeuristicLighting, HeuristicLightingConfig};
pub use logistic::{loss_and_grad, predict, FeatureScaling, LogisticModel, MODEL_VERSION};
pub use onnx::{load_external, OnnxDetector};

use serde::{Deserialize, Serialize};

use crate::imaging::ImagingError;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature arity mismatch: model has {expected} weights, got {found} features")]
    ArityMismatch { expected: usize, found: usize },
    #[error("detector produced a non-finite score")]
    NonFiniteScore,
    #[error("input holds values outside [0, 1]; expected un-normalized intensities")]
    NormalizedInput,
    #[error("unreadable model: {0}")]
    UnreadableModel(String),
    #[error("model violates the input/output shape contract: {0}")]
    ShapeContractViolation(String),
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Output of one detector on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Probability of the positive class.
    pub score: f64,
    pub label: bool,
}

impl Detection {
    pub fn from_score(score: f64, threshold: f64) -> Self {
        Self {
            score,
            label: score >= threshold,
        }
    }
}

/// A binary detector for one tier.
pub trait Detector: Send + Sync {
    /// Backend name reported by the service.
    fn kind(&self) -> &'static str;

    fn threshold(&self) -> f64;

    /// Positive-class probability for a standardized input tensor.
    fn score(&self, input: &crate::imaging::PlaneTensor) -> Result<f64, DetectorError>;

    fn detect(&self, input: &crate::imaging::PlaneTensor) -> Result<Detection, DetectorError> {
        let score = self.score(input)?;
        if !score.is_finite() {
            return Err(DetectorError::NonFiniteScore);
        }
        Ok(Detection::from_score(score, self.threshold()))
    }
}

impl<D: Detector + ?Sized> Detector for &D {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
    fn threshold(&self) -> f64 {
        (**self).threshold()
    }
    fn score(&self, input: &crate::imaging::PlaneTensor) -> Result<f64, DetectorError> {
        (**self).score(input)
    }
    fn detect(&self, input: &crate::imaging::PlaneTensor) -> Result<Detection, DetectorError> {
        (**self).detect(input)
    }
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
    fn threshold(&self) -> f64 {
        (**self).threshold()
    }
    fn score(&self, input: &crate::imaging::PlaneTensor) -> Result<f64, DetectorError> {
        (**self).score(input)
    }
    fn detect(&self, input: &crate::imaging::PlaneTensor) -> Result<Detection, DetectorError> {
        (**self).detect(input)
    }
}

impl<D: Detector + ?Sized> Detector for std::sync::Arc<D> {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
    fn threshold(&self) -> f64 {
        (**self).threshold()
    }
    fn score(&self, input: &crate::imaging::PlaneTensor) -> Result<f64, DetectorError> {
        (**self).score(input)
    }
    fn detect(&self, input: &crate::imaging::PlaneTensor) -> Result<Detection, DetectorError> {
        (**self).detect(input)
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<(), DetectorError> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(DetectorError::InvalidConfig(format!(
            "threshold {threshold} outside [0, 1]"
        )))
    }
}
