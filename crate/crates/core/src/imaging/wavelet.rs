//! Orthonormal 2-D Haar analysis/synthesis in Mallat layout.
//!
//! One level maps each 2x2 block `{a, b; c, d}` to
//! `LL = (a+b+c+d)/2`, `LH = (a+b-c-d)/2`, `HL = (a-b+c-d)/2`,
//! `HH = (a-b-c+d)/2`. Within the transformed region LL occupies the
//! top-left quadrant, LH the top-right, HL the bottom-left and HH the
//! bottom-right; further levels recurse into LL.

use super::{ImagingError, PlaneTensor};

fn check(t: &PlaneTensor, levels: u32) -> Result<(), ImagingError> {
    let block = 1usize.checked_shl(levels).unwrap_or(0);
    let (h, w) = (t.height(), t.width());
    if block == 0 || h % block != 0 || w % block != 0 || h == 0 || w == 0 {
        return Err(ImagingError::IndivisibleSize {
            height: h,
            width: w,
            levels,
        });
    }
    Ok(())
}

/// Forward transform applied `levels` times to the running LL quadrant.
pub fn haar_dwt2(t: &PlaneTensor, levels: u32) -> Result<PlaneTensor, ImagingError> {
    if levels == 0 {
        return Ok(t.clone());
    }
    check(t, levels)?;
    let (h, w) = (t.height(), t.width());
    let mut out = t.clone();
    let mut scratch = vec![0.0f32; h * w];
    for c in 0..t.channels() {
        let plane = out.plane_mut(c);
        let (mut rh, mut rw) = (h, w);
        for _ in 0..levels {
            analyze(plane, w, rh, rw, &mut scratch);
            rh /= 2;
            rw /= 2;
        }
    }
    Ok(out)
}

/// Exact inverse of [`haar_dwt2`].
pub fn haar_idwt2(t: &PlaneTensor, levels: u32) -> Result<PlaneTensor, ImagingError> {
    if levels == 0 {
        return Ok(t.clone());
    }
    check(t, levels)?;
    let (h, w) = (t.height(), t.width());
    let mut out = t.clone();
    let mut scratch = vec![0.0f32; h * w];
    for c in 0..t.channels() {
        let plane = out.plane_mut(c);
        for level in (0..levels).rev() {
            synthesize(plane, w, h >> level, w >> level, &mut scratch);
        }
    }
    Ok(out)
}

// Transforms the top-left `rh x rw` region of a plane with row stride `stride`.
fn analyze(plane: &mut [f32], stride: usize, rh: usize, rw: usize, scratch: &mut [f32]) {
    let (qh, qw) = (rh / 2, rw / 2);
    for y in 0..qh {
        for x in 0..qw {
            let a = plane[2 * y * stride + 2 * x];
            let b = plane[2 * y * stride + 2 * x + 1];
            let c = plane[(2 * y + 1) * stride + 2 * x];
            let d = plane[(2 * y + 1) * stride + 2 * x + 1];
            scratch[y * rw + x] = (a + b + c + d) * 0.5;
            scratch[y * rw + x + qw] = (a + b - c - d) * 0.5;
            scratch[(y + qh) * rw + x] = (a - b + c - d) * 0.5;
            scratch[(y + qh) * rw + x + qw] = (a - b - c + d) * 0.5;
        }
    }
    for y in 0..rh {
        plane[y * stride..y * stride + rw].copy_from_slice(&scratch[y * rw..(y + 1) * rw]);
    }
}

fn synthesize(plane: &mut [f32], stride: usize, rh: usize, rw: usize, scratch: &mut [f32]) {
    let (qh, qw) = (rh / 2, rw / 2);
    for y in 0..qh {
        for x in 0..qw {
            let ll = plane[y * stride + x];
            let lh = plane[y * stride + x + qw];
            let hl = plane[(y + qh) * stride + x];
            let hh = plane[(y + qh) * stride + x + qw];
            scratch[2 * y * rw + 2 * x] = (ll + lh + hl + hh) * 0.5;
            scratch[2 * y * rw + 2 * x + 1] = (ll + lh - hl - hh) * 0.5;
            scratch[(2 * y + 1) * rw + 2 * x] = (ll - lh + hl - hh) * 0.5;
            scratch[(2 * y + 1) * rw + 2 * x + 1] = (ll - lh - hl + hh) * 0.5;
        }
    }
    for y in 0..rh {
        plane[y * stride..y * stride + rw].copy_from_slice(&scratch[y * rw..(y + 1) * rw]);
    }
}
