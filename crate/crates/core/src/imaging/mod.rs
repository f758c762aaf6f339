//! Image decoding, geometric standardization, normalization and the Haar
//! wavelet transform used by the detector inputs.

mod codec;
mod geometry;
mod normalize;
mod wavelet;

pub use codec::{decode_image, encode_png};
pub use geometry::resize_pad;
pub use normalize::{normalize, normalize_planes, Normalization};
pub use wavelet::{haar_dwt2, haar_idwt2};

use serde::{Deserialize, Serialize};

/// Default network input side.
pub const DEFAULT_SIDE: u32 = 224;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("image is empty")]
    EmptyImage,
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("spatial size {height}x{width} is not divisible by 2^{levels}")]
    IndivisibleSize {
        height: usize,
        width: usize,
        levels: u32,
    },
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("png encoding failed: {0}")]
    Encode(String),
}

/// Decoded raster with interleaved, row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl PixelImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImagingError> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::ChannelMismatch {
                expected: 3,
                found: channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::MalformedImage(format!(
                "buffer holds {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::MalformedImage(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image filled with a single intensity.
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("filled image with a valid value")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Replicates a grayscale channel into three; RGB images are returned as is.
    pub fn to_rgb(&self) -> PixelImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        PixelImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// Channel-major float planes, the detector input representation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PlaneTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImagingError> {
        if data.len() != channels * height * width {
            return Err(ImagingError::MalformedImage(format!(
                "tensor buffer holds {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::MalformedImage(
                "tensor contains non-finite values".into(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Transposes an interleaved image into planes without changing values.
    pub fn from_image(img: &PixelImage) -> Self {
        let (w, h, c) = (img.width, img.height, img.channels);
        let mut data = vec![0.0; w * h * c];
        for (i, px) in img.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * w * h + i] = v;
            }
        }
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// How a standardized `[0, 1]` image becomes a detector input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default = "default_side")]
    pub target_side: u32,
    #[serde(default)]
    pub normalization: Normalization,
    /// 0 disables the transform.
    #[serde(default)]
    pub wavelet_levels: u32,
}

fn default_side() -> u32 {
    DEFAULT_SIDE
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_side: DEFAULT_SIDE,
            normalization: Normalization::default(),
            wavelet_levels: 0,
        }
    }
}

impl PreprocessConfig {
    /// Configuration that leaves intensities in `[0, 1]`.
    pub fn raw() -> Self {
        Self {
            normalization: Normalization::Identity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.target_side == 0 {
            return Err(ImagingError::InvalidConfig(
                "target_side must be >= 1".into(),
            ));
        }
        if self.wavelet_levels > self.target_side.ilog2() {
            return Err(ImagingError::InvalidConfig(format!(
                "wavelet_levels {} exceeds log2({})",
                self.wavelet_levels, self.target_side
            )));
        }
        self.normalization.validate()
    }

    /// Applies normalization and the optional wavelet transform to a
    /// standardized tensor.
    pub fn apply(&self, t: &PlaneTensor) -> Result<PlaneTensor, ImagingError> {
        let normalized = normalize_planes(t, &self.normalization)?;
        haar_dwt2(&normalized, self.wavelet_levels)
    }
}

/// Full input path shared by the service and CLI: RGB conversion, resize
/// with zero padding, and channel-major layout with intensities untouched.
pub fn standardize(img: &PixelImage, target_side: u32) -> Result<PlaneTensor, ImagingError> {
    let squared = resize_pad(&img.to_rgb(), target_side)?;
    Ok(PlaneTensor::from_image(&squared))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_image_rejects_out_of_range() {
        assert!(PixelImage::new(1, 1, 1, vec![1.5]).is_err());
        assert!(PixelImage::new(2, 1, 1, vec![0.5]).is_err());
        assert!(PixelImage::new(1, 1, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn from_image_is_a_transpose() {
        let img = PixelImage::new(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t = PlaneTensor::from_image(&img);
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        assert_eq!(t.at(2, 0, 1), 0.6);
    }

    #[test]
    fn gray_expands_to_rgb() {
        let img = PixelImage::new(1, 1, 1, vec![0.25]).unwrap();
        assert_eq!(img.to_rgb().data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn config_rejects_too_many_levels() {
        let cfg = PreprocessConfig {
            target_side: 8,
            wavelet_levels: 4,
            ..PreprocessConfig::default()
        };
        assert!(cfg.validate().is_err());
        let ok = PreprocessConfig {
            target_side: 224,
            wavelet_levels: 2,
            ..PreprocessConfig::default()
        };
        assert!(ok.validate().is_ok());
    }
}
