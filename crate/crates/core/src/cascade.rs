//! Two-tier quality cascade: eye presence gates lighting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorError};
use crate::imaging::PlaneTensor;
use crate::metrics::{binary_metrics, collapse_binary, HierConfusion, MetricReport, MetricsError};

/// Hierarchical ground truth / prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierLabel {
    NoEye,
    EyeBadLight,
    EyeGoodLight,
}

impl HierLabel {
    pub const ALL: [HierLabel; 3] = [Self::NoEye, Self::EyeBadLight, Self::EyeGoodLight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoEye => "no_eye",
            Self::EyeBadLight => "eye_bad_light",
            Self::EyeGoodLight => "eye_good_light",
        }
    }

    /// Tier-1 binary label: eye present.
    pub fn eye_present(self) -> bool {
        self != Self::NoEye
    }

    /// Tier-2 binary label; `None` when there is no eye to judge.
    pub fn good_light(self) -> Option<bool> {
        match self {
            Self::NoEye => None,
            Self::EyeBadLight => Some(false),
            Self::EyeGoodLight => Some(true),
        }
    }
}

impl std::fmt::Display for HierLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HierLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown hierarchical label `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    EyePresence,
    Lighting,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::EyePresence => "eye_presence",
            Self::Lighting => "lighting",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Retake,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_camel_case_types, clippy::upper_case_acronyms)]
pub enum FeedbackCode {
    OK,
    NO_EYE_DETECTED,
    POOR_LIGHTING,
}

/// Placeholder for the resolution / cornea / focus checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier3Status {
    #[default]
    NotImplemented,
}

pub fn feedback_message(code: FeedbackCode) -> &'static str {
    match code {
        FeedbackCode::OK => "Image quality acceptable.",
        FeedbackCode::NO_EYE_DETECTED => {
            "No open eye detected — please retake with the eye open and centered."
        }
        FeedbackCode::POOR_LIGHTING => {
            "Image is poorly lit — please retake in even, adequate lighting."
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierScores {
    pub eye_presence: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lighting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub failed_tier: Option<Tier>,
    pub feedback_code: FeedbackCode,
    pub feedback: String,
    pub tier_scores: TierScores,
    pub tier3: Tier3Status,
}

impl Verdict {
    fn new(code: FeedbackCode, tier_scores: TierScores) -> Self {
        let (decision, failed_tier) = match code {
            FeedbackCode::OK => (Decision::Accept, None),
            FeedbackCode::NO_EYE_DETECTED => (Decision::Retake, Some(Tier::EyePresence)),
            FeedbackCode::POOR_LIGHTING => (Decision::Retake, Some(Tier::Lighting)),
        };
        Self {
            decision,
            failed_tier,
            feedback_code: code,
            feedback: feedback_message(code).to_string(),
            tier_scores,
            tier3: Tier3Status::NotImplemented,
        }
    }

    pub fn label(&self) -> HierLabel {
        match self.failed_tier {
            Some(Tier::EyePresence) => HierLabel::NoEye,
            Some(Tier::Lighting) => HierLabel::EyeBadLight,
            None => HierLabel::EyeGoodLight,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CascadeError {
    #[error("{tier} detector failed: {source}")]
    Detector {
        tier: Tier,
        #[source]
        source: DetectorError,
    },
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("cannot load sample `{id}`: {message}")]
    Input { id: String, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CascadeError {
    pub fn tier(&self) -> Option<Tier> {
        match self {
            Self::Detector { tier, .. } => Some(*tier),
            _ => None,
        }
    }
}

/// Runs tier 1, then tier 2 only if tier 1 accepted.
pub fn assess<A: Detector + ?Sized, B: Detector + ?Sized>(
    t: &PlaneTensor,
    tier1: &A,
    tier2: &B,
) -> Result<Verdict, CascadeError> {
    let eye = tier1.detect(t).map_err(|source| CascadeError::Detector {
        tier: Tier::EyePresence,
        source,
    })?;
    let mut scores = TierScores {
        eye_presence: eye.score,
        lighting: None,
    };
    if !eye.label {
        return Ok(Verdict::new(FeedbackCode::NO_EYE_DETECTED, scores));
    }
    let light = tier2.detect(t).map_err(|source| CascadeError::Detector {
        tier: Tier::Lighting,
        source,
    })?;
    scores.lighting = Some(light.score);
    let code = if light.label {
        FeedbackCode::OK
    } else {
        FeedbackCode::POOR_LIGHTING
    };
    Ok(Verdict::new(code, scores))
}

pub fn classify3<A: Detector + ?Sized, B: Detector + ?Sized>(
    t: &PlaneTensor,
    tier1: &A,
    tier2: &B,
) -> Result<HierLabel, CascadeError> {
    Ok(assess(t, tier1, tier2)?.label())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HierEvaluation {
    pub confusion: HierConfusion,
    pub binary: MetricReport,
}

/// Tallies `classify3` against the truth over `samples`, loading each input
/// lazily with `load`. Partial matrices from worker threads are summed.
pub fn hierarchical_eval_with<S, F, A, B>(
    samples: &[S],
    load: F,
    tier1: &A,
    tier2: &B,
) -> Result<HierEvaluation, CascadeError>
where
    S: Sync,
    F: Fn(&S) -> Result<(PlaneTensor, HierLabel), CascadeError> + Sync,
    A: Detector + ?Sized,
    B: Detector + ?Sized,
{
    if samples.is_empty() {
        return Err(CascadeError::EmptySet);
    }
    let confusion = samples
        .par_iter()
        .map(|s| {
            let (t, truth) = load(s)?;
            let mut part = HierConfusion::default();
            part.record(truth, classify3(&t, tier1, tier2)?);
            Ok::<_, CascadeError>(part)
        })
        .try_reduce(HierConfusion::default, |a, b| Ok(a + b))?;
    let binary = binary_metrics(&collapse_binary(&confusion))?;
    Ok(HierEvaluation { confusion, binary })
}

pub fn hierarchical_eval<A: Detector + ?Sized, B: Detector + ?Sized>(
    samples: &[(PlaneTensor, HierLabel)],
    tier1: &A,
    tier2: &B,
) -> Result<HierEvaluation, CascadeError> {
    hierarchical_eval_with(samples, |(t, l)| Ok((t.clone(), *l)), tier1, tier2)
}
