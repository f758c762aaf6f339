use std::io::Cursor;

use image::{DynamicImage, ImageFormat};

use super::{ImagingError, PixelImage};

/// Decodes a PNG or JPEG stream into `[0, 1]` intensities.
///
/// Grayscale stays single-channel; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<PixelImage, ImagingError> {
    if bytes.is_empty() {
        return Err(ImagingError::MalformedImage("empty byte stream".into()));
    }
    let format = image::guess_format(bytes)
        .map_err(|_| ImagingError::MalformedImage("unrecognized image signature".into()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(ImagingError::UnsupportedFormat(format!("{format:?}")));
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImagingError::MalformedImage(e.to_string()))?;
    from_dynamic(decoded)
}

fn from_dynamic(img: DynamicImage) -> Result<PixelImage, ImagingError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(ImagingError::EmptyImage);
    }
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let data: Vec<f32> = match (gray, sixteen) {
        (true, false) => img.to_luma8().into_raw().into_iter().map(u8_unit).collect(),
        (true, true) => img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(u16_unit)
            .collect(),
        (false, false) => img.to_rgb8().into_raw().into_iter().map(u8_unit).collect(),
        (false, true) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(u16_unit)
            .collect(),
    };
    PixelImage::new(w, h, if gray { 1 } else { 3 }, data)
}

fn u8_unit(v: u8) -> f32 {
    f32::from(v) / 255.0
}

fn u16_unit(v: u16) -> f32 {
    f32::from(v) / 65535.0
}

/// Encodes to 8-bit PNG, quantizing by rounding.
pub fn encode_png(img: &PixelImage) -> Result<Vec<u8>, ImagingError> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = if img.channels() == 1 {
        image::GrayImage::from_raw(w, h, bytes).map(DynamicImage::ImageLuma8)
    } else {
        image::RgbImage::from_raw(w, h, bytes).map(DynamicImage::ImageRgb8)
    }
    .ok_or_else(|| ImagingError::Encode("buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}
