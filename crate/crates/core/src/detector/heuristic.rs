use serde::{Deserialize, Serialize};

use crate::imaging::PlaneTensor;

use super::{check_threshold, Detection, Detector, DetectorError};

// Tolerance for float noise when checking the [0, 1] input contract.
const RANGE_SLACK: f32 = 1e-6;
const SATURATION_LEVEL: f32 = 0.98;
// Width of the linear ramp from score 0 at a bound to score 1 inside it.
const MEAN_RAMP: f64 = 0.05;
const STD_RAMP: f64 = 0.05;

/// Bounds of the acceptable-lighting region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicLightingConfig {
    pub min_mean: f64,
    pub max_mean: f64,
    /// Fraction of values at or above 0.98.
    pub max_saturated_fraction: f64,
    pub max_std: f64,
}

impl Default for HeuristicLightingConfig {
    fn default() -> Self {
        Self {
            min_mean: 0.25,
            max_mean: 0.85,
            max_saturated_fraction: 0.05,
            max_std: 0.35,
        }
    }
}

impl HeuristicLightingConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let ok = 0.0 < self.min_mean
            && self.min_mean < self.max_mean
            && self.max_mean < 1.0
            && self.max_saturated_fraction > 0.0
            && self.max_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DetectorError::InvalidConfig(format!(
                "invalid heuristic lighting bounds {self:?}"
            )))
        }
    }
}

struct LightingStats {
    mean: f64,
    std: f64,
    saturated: f64,
}

fn stats(t: &PlaneTensor) -> Result<LightingStats, DetectorError> {
    let data = t.data();
    if data.is_empty() {
        return Err(DetectorError::ShapeMismatch("empty tensor".into()));
    }
    if data
        .iter()
        .any(|&v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v))
    {
        return Err(DetectorError::NormalizedInput);
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    let saturated = data.iter().filter(|&&v| v >= SATURATION_LEVEL).count() as f64 / n;
    Ok(LightingStats {
        mean,
        std: var.sqrt(),
        saturated,
    })
}

/// Rule-based lighting check on un-normalized intensities.
///
/// Positive iff the pooled mean lies in `[min_mean, max_mean]`, the
/// saturated fraction is at most `max_saturated_fraction` and the pooled
/// standard deviation is at most `max_std`. The score is the product of
/// per-criterion margins, each ramping linearly from 0 at its bound to 1
/// inside the region, so it is 1 well inside and 0 on or past any bound.
/// The returned label is that rule; higher thresholds are applied by
/// [`HeuristicLighting`].
pub fn heuristic_lighting(
    t: &PlaneTensor,
    cfg: &HeuristicLightingConfig,
) -> Result<Detection, DetectorError> {
    let s = stats(t)?;
    let positive = (cfg.min_mean..=cfg.max_mean).contains(&s.mean)
        && s.saturated <= cfg.max_saturated_fraction
        && s.std <= cfg.max_std;
    let ramp = |distance: f64, width: f64| (distance / width).clamp(0.0, 1.0);
    let mean_margin = ramp(
        (s.mean - cfg.min_mean).min(cfg.max_mean - s.mean),
        MEAN_RAMP,
    );
    let sat_margin = ramp(
        cfg.max_saturated_fraction - s.saturated,
        0.5 * cfg.max_saturated_fraction,
    );
    let std_margin = ramp(cfg.max_std - s.std, STD_RAMP);
    Ok(Detection {
        score: mean_margin * sat_margin * std_margin,
        label: positive,
    })
}

/// Tier-2 detector wrapping [`heuristic_lighting`].
///
/// A threshold of 0 (the default) reproduces the rule exactly; a positive
/// threshold additionally requires the soft margin to reach it.
#[derive(Debug, Clone, Default)]
pub struct HeuristicLighting {
    pub config: HeuristicLightingConfig,
    pub threshold: f64,
}

impl HeuristicLighting {
    pub fn new(config: HeuristicLightingConfig, threshold: f64) -> Result<Self, DetectorError> {
        config.validate()?;
        check_threshold(threshold)?;
        Ok(Self { config, threshold })
    }
}

impl Detector for HeuristicLighting {
    fn kind(&self) -> &'static str {
        "heuristic"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn score(&self, input: &PlaneTensor) -> Result<f64, DetectorError> {
        Ok(heuristic_lighting(input, &self.config)?.score)
    }

    fn detect(&self, input: &PlaneTensor) -> Result<Detection, DetectorError> {
        let d = heuristic_lighting(input, &self.config)?;
        Ok(Detection {
            score: d.score,
            label: d.label && d.score >= self.threshold,
        })
    }
}
