use super::{ImagingError, PixelImage};

/// Scales the longer side to `target_side` (bilinear, aspect preserved) and
/// zero-pads the shorter axis symmetrically. An odd leftover pad row or
/// column goes to the bottom/right.
pub fn resize_pad(img: &PixelImage, target_side: u32) -> Result<PixelImage, ImagingError> {
    if img.is_empty() {
        return Err(ImagingError::EmptyImage);
    }
    if target_side == 0 {
        return Err(ImagingError::InvalidConfig(
            "target_side must be >= 1".into(),
        ));
    }
    let side = target_side as usize;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (cw, ch) = content_size(w, h, side);
    let content = if (cw, ch) == (w, h) {
        img.data().to_vec()
    } else {
        bilinear(img, cw, ch)
    };

    let left = (side - cw) / 2;
    let top = (side - ch) / 2;
    let mut out = vec![0.0f32; side * side * c];
    for y in 0..ch {
        let src = &content[y * cw * c..(y + 1) * cw * c];
        let start = ((top + y) * side + left) * c;
        out[start..start + cw * c].copy_from_slice(src);
    }
    PixelImage::new(side, side, c, out)
}

fn content_size(w: usize, h: usize, side: usize) -> (usize, usize) {
    if w >= h {
        let other = ((h as f64) * (side as f64) / (w as f64)).round() as usize;
        (side, other.clamp(1, side))
    } else {
        let other = ((w as f64) * (side as f64) / (h as f64)).round() as usize;
        (other.clamp(1, side), side)
    }
}

// Half-pixel-centre sampling with edge clamping.
fn bilinear(img: &PixelImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    let taps = |pos: f32, limit: usize| -> (usize, usize, f32) {
        let p = pos.clamp(0.0, (limit - 1) as f32);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(limit - 1);
        (i0, i1, p - i0 as f32)
    };
    let mut out = Vec::with_capacity(out_w * out_h * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = taps((oy as f32 + 0.5) * sy - 0.5, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = taps((ox as f32 + 0.5) * sx - 0.5, w);
            for ch in 0..c {
                let top = img.pixel(x0, y0, ch) * (1.0 - fx) + img.pixel(x1, y0, ch) * fx;
                let bottom = img.pixel(x0, y1, ch) * (1.0 - fx) + img.pixel(x1, y1, ch) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}
