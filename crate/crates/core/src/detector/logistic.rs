use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imaging::{PlaneTensor, PreprocessConfig};

use super::{
    check_threshold, extract_features, Detection, Detector, DetectorError, FeatureVector,
    DEFAULT_THRESHOLD, FEATURE_LAYOUT, FEATURE_LEN,
};

pub const MODEL_VERSION: u32 = 1;

const PROB_CLAMP: f64 = 1e-12;

/// Per-feature standardization `(x - mean) / scale` applied before the
/// linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaling {
    /// Column statistics of `rows` (population std). Constant columns,
    /// such as the bias, pass through unchanged.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> Option<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for row in rows {
            let x = row.as_slice();
            if n == 0 {
                sum = vec![0.0; x.len()];
                sq = vec![0.0; x.len()];
            } else if x.len() != sum.len() {
                return None;
            }
            for (i, &v) in x.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let n = n as f64;
        let mut mean = Vec::with_capacity(sum.len());
        let mut scale = Vec::with_capacity(sum.len());
        for (s, q) in sum.iter().zip(&sq) {
            let m = s / n;
            let sd = (q / n - m * m).max(0.0).sqrt();
            if sd > 1e-9 * m.abs().max(1.0) {
                mean.push(m);
                scale.push(sd);
            } else {
                mean.push(0.0);
                scale.push(1.0);
            }
        }
        Some(Self { mean, scale })
    }

    fn validate(&self, len: usize) -> bool {
        self.mean.len() == len
            && self.scale.len() == len
            && self.mean.iter().all(|m| m.is_finite())
            && self.scale.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// Logistic reference detector over engineered features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    /// Momentum buffer owned by the training loop.
    pub velocity: Vec<f64>,
    pub threshold: f64,
    pub preprocess: PreprocessConfig,
    /// `None` feeds raw features to the linear layer.
    pub scaling: Option<FeatureScaling>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    version: u32,
    feature_layout: String,
    threshold: f64,
    preprocess: PreprocessConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_scaling: Option<FeatureScaling>,
    weights: Vec<f64>,
}

impl LogisticModel {
    /// Zero weights and velocity.
    pub fn new(preprocess: PreprocessConfig) -> Self {
        Self::with_weights(vec![0.0; FEATURE_LEN], preprocess)
    }

    pub fn with_weights(weights: Vec<f64>, preprocess: PreprocessConfig) -> Self {
        let velocity = vec![0.0; weights.len()];
        Self {
            weights,
            velocity,
            threshold: DEFAULT_THRESHOLD,
            preprocess,
            scaling: None,
        }
    }

    pub fn with_scaling(mut self, scaling: Option<FeatureScaling>) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    /// Features of a standardized tensor under this model's preprocessing.
    pub fn features(&self, input: &PlaneTensor) -> Result<FeatureVector, DetectorError> {
        extract_features(&self.preprocess.apply(input)?)
    }

    /// Input of the linear layer: `f`, standardized if the model has a
    /// scaling.
    pub fn linear_input(&self, f: &FeatureVector) -> Result<Vec<f64>, DetectorError> {
        if f.len() != self.weights.len() {
            return Err(DetectorError::ArityMismatch {
                expected: self.weights.len(),
                found: f.len(),
            });
        }
        Ok(match &self.scaling {
            None => f.as_slice().to_vec(),
            Some(s) => f
                .as_slice()
                .iter()
                .zip(s.mean.iter().zip(&s.scale))
                .map(|(x, (m, sd))| (x - m) / sd)
                .collect(),
        })
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum()
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDocument {
            version: MODEL_VERSION,
            feature_layout: FEATURE_LAYOUT.to_string(),
            threshold: self.threshold,
            preprocess: self.preprocess.clone(),
            feature_scaling: self.scaling.clone(),
            weights: self.weights.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        let doc: ModelDocument = serde_json::from_str(text)
            .map_err(|e| DetectorError::UnreadableModel(e.to_string()))?;
        if doc.version != MODEL_VERSION {
            return Err(DetectorError::UnreadableModel(format!(
                "unsupported model version {}",
                doc.version
            )));
        }
        if doc.feature_layout != FEATURE_LAYOUT {
            return Err(DetectorError::UnreadableModel(format!(
                "unknown feature layout `{}`",
                doc.feature_layout
            )));
        }
        if doc.weights.len() != FEATURE_LEN || doc.weights.iter().any(|w| !w.is_finite()) {
            return Err(DetectorError::UnreadableModel(format!(
                "expected {FEATURE_LEN} finite weights"
            )));
        }
        if let Some(s) = &doc.feature_scaling {
            if !s.validate(FEATURE_LEN) {
                return Err(DetectorError::UnreadableModel(format!(
                    "feature_scaling needs {FEATURE_LEN} finite means and positive scales"
                )));
            }
        }
        check_threshold(doc.threshold)?;
        doc.preprocess.validate()?;
        Ok(Self::with_weights(doc.weights, doc.preprocess)
            .with_threshold(doc.threshold)
            .with_scaling(doc.feature_scaling))
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path).map_err(|source| DetectorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        std::fs::write(path, self.to_json()).map_err(|source| DetectorError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `1 / (1 + exp(-w.x))` with `x` the linear input of `f`, labelled
/// against the model threshold.
pub fn predict(model: &LogisticModel, f: &FeatureVector) -> Result<Detection, DetectorError> {
    let z = model.logit(&model.linear_input(f)?);
    let score = sigmoid(z);
    if !score.is_finite() {
        return Err(DetectorError::NonFiniteScore);
    }
    Ok(Detection::from_score(score, model.threshold))
}

/// Cross-entropy loss and its gradient `(p - y) x` with respect to the
/// weights, `x` being the linear input (`f` itself without scaling).
pub fn loss_and_grad(
    model: &LogisticModel,
    f: &FeatureVector,
    y: bool,
) -> Result<(f64, Vec<f64>), DetectorError> {
    let x = model.linear_input(f)?;
    let p = sigmoid(model.logit(&x));
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let target = if y { 1.0 } else { 0.0 };
    let loss = -(target * clamped.ln() + (1.0 - target) * (1.0 - clamped).ln());
    let grad = x.iter().map(|x| (p - target) * x).collect();
    Ok((loss, grad))
}

impl Detector for LogisticModel {
    fn kind(&self) -> &'static str {
        "logistic"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn score(&self, input: &PlaneTensor) -> Result<f64, DetectorError> {
        Ok(predict(self, &self.features(input)?)?.score)
    }
}
