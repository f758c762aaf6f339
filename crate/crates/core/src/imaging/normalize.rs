use serde::{Deserialize, Serialize};

use super::{ImagingError, PixelImage, PlaneTensor, PreprocessConfig};

pub const IMAGENET_MEANS: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STDS: [f32; 3] = [0.229, 0.224, 0.225];

// Floor for per-image standardization of flat planes.
const MIN_PLANE_STD: f32 = 1e-6;

/// Per-channel affine normalization applied before a detector sees its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// ImageNet channel statistics.
    #[default]
    Imagenet,
    /// Values stay in `[0, 1]`.
    Identity,
    /// Each channel standardized by its own mean and standard deviation.
    PerImage,
    /// Explicit constants.
    Channel { means: Vec<f32>, stds: Vec<f32> },
}

impl Normalization {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if let Normalization::Channel { means, stds } = self {
            if means.len() != stds.len() {
                return Err(ImagingError::InvalidConfig(
                    "channel_means and channel_stds differ in length".into(),
                ));
            }
            if stds.iter().any(|s| s.is_nan() || *s <= 0.0) {
                return Err(ImagingError::InvalidConfig(
                    "channel_stds must be strictly positive".into(),
                ));
            }
            if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(ImagingError::InvalidConfig(
                    "channel_means must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    fn constants(&self, t: &PlaneTensor) -> Result<(Vec<f32>, Vec<f32>), ImagingError> {
        let c = t.channels();
        let fixed = |means: &[f32], stds: &[f32]| {
            if means.len() != c {
                Err(ImagingError::ChannelMismatch {
                    expected: means.len(),
                    found: c,
                })
            } else {
                Ok((means.to_vec(), stds.to_vec()))
            }
        };
        match self {
            Normalization::Imagenet => fixed(&IMAGENET_MEANS, &IMAGENET_STDS),
            Normalization::Identity => Ok((vec![0.0; c], vec![1.0; c])),
            Normalization::Channel { means, stds } => fixed(means, stds),
            Normalization::PerImage => Ok((0..c)
                .map(|ch| {
                    let plane = t.plane(ch);
                    let n = plane.len().max(1) as f64;
                    let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                    let var = plane
                        .iter()
                        .map(|&v| (f64::from(v) - mean).powi(2))
                        .sum::<f64>()
                        / n;
                    (mean as f32, (var.sqrt() as f32).max(MIN_PLANE_STD))
                })
                .unzip()),
        }
    }
}

/// `(x - mean[c]) / std[c]` per channel on already channel-major data.
pub fn normalize_planes(
    t: &PlaneTensor,
    norm: &Normalization,
) -> Result<PlaneTensor, ImagingError> {
    norm.validate()?;
    if *norm == Normalization::Identity {
        return Ok(t.clone());
    }
    let (means, stds) = norm.constants(t)?;
    let mut out = t.clone();
    for (c, (m, s)) in means.iter().zip(&stds).enumerate() {
        for v in out.plane_mut(c) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Converts an interleaved, target-sized image to normalized planes.
pub fn normalize(img: &PixelImage, cfg: &PreprocessConfig) -> Result<PlaneTensor, ImagingError> {
    let side = cfg.target_side as usize;
    if img.width() != side || img.height() != side {
        return Err(ImagingError::InvalidConfig(format!(
            "image is {}x{}, expected {side}x{side}",
            img.width(),
            img.height()
        )));
    }
    normalize_planes(&PlaneTensor::from_image(img), &cfg.normalization)
}
