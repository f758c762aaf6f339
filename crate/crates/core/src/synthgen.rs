//! Deterministic synthetic eye images with controllable eye presence and
//! illumination.
//!
//! An eye is drawn schematically as a sclera ellipse holding a shaded iris
//! disc and a dark pupil, over a flat, gradient or cluttered skin-toned
//! background. Images without an eye are the background alone. The image
//! mean is then pulled to the requested illumination: a multiplicative gain
//! darkens, a mix toward white brightens. Gaussian noise follows, and an
//! optional saturated blob is painted last.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::HierLabel;
use crate::imaging::{encode_png, ImagingError, PixelImage, DEFAULT_SIDE};

/// Blob fractions at or below this still count as well lit.
pub const MAX_GOOD_BLOB_FRACTION: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid eye geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Clutter,
}

/// Eye placement and sizes in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeGeometry {
    pub center_x: f64,
    pub center_y: f64,
    /// Horizontal and vertical sclera semi-axes.
    pub sclera_a: f64,
    pub sclera_b: f64,
    pub iris_radius: f64,
    pub pupil_radius: f64,
}

impl EyeGeometry {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.pupil_radius > 0.0
            && self.pupil_radius < self.iris_radius
            && self.iris_radius < self.sclera_a.min(self.sclera_b);
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidGeometry(format!(
                "need 0 < pupil {} < iris {} < min sclera axis {}",
                self.pupil_radius,
                self.iris_radius,
                self.sclera_a.min(self.sclera_b)
            )))
        }
    }
}

/// Everything needed to render one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub side: u32,
    pub eye_present: bool,
    /// Target mean intensity before the blob is painted.
    pub illumination: f64,
    pub saturation_blob_fraction: f64,
    pub geometry: EyeGeometry,
    pub noise_std: f64,
    pub background_kind: BackgroundKind,
    pub skin: [f32; 3],
    pub iris_color: [f32; 3],
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.side < 8 {
            return Err(SynthError::InvalidConfig("side must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.illumination)
            || !(0.0..=1.0).contains(&self.saturation_blob_fraction)
            || self.noise_std.is_nan()
            || self.noise_std < 0.0
        {
            return Err(SynthError::InvalidConfig(format!(
                "illumination {}, blob fraction {} and noise {} out of range",
                self.illumination, self.saturation_blob_fraction, self.noise_std
            )));
        }
        self.geometry.validate()
    }

    /// Label implied by these parameters under a good-light range.
    pub fn label(&self, good_light: [f64; 2]) -> HierLabel {
        if !self.eye_present {
            HierLabel::NoEye
        } else if (good_light[0]..=good_light[1]).contains(&self.illumination)
            && self.saturation_blob_fraction <= MAX_GOOD_BLOB_FRACTION
        {
            HierLabel::EyeGoodLight
        } else {
            HierLabel::EyeBadLight
        }
    }
}

struct Canvas {
    side: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
        if alpha <= 0.0 {
            return;
        }
        let i = (y * self.side + x) * 3;
        let a = alpha.min(1.0);
        for (v, target) in self.data[i..i + 3].iter_mut().zip(rgb) {
            *v += a * (target - *v);
        }
    }

    fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

// Edge coverage for a signed distance in pixels (negative inside).
fn coverage(distance: f64) -> f32 {
    (0.5 - distance).clamp(0.0, 1.0) as f32
}

fn scale_rgb(rgb: [f32; 3], k: f32) -> [f32; 3] {
    rgb.map(|v| (v * k).clamp(0.0, 1.0))
}

fn paint_background(canvas: &mut Canvas, p: &SceneParams, rng: &mut ChaCha8Rng) {
    let s = canvas.side;
    let sf = s as f64;
    match p.background_kind {
        BackgroundKind::Flat => {
            for px in canvas.data.chunks_exact_mut(3) {
                px.copy_from_slice(&p.skin);
            }
        }
        BackgroundKind::Gradient => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let lo = scale_rgb(p.skin, rng.gen_range(0.75..0.9));
            let hi = scale_rgb(p.skin, rng.gen_range(1.1..1.25));
            for y in 0..s {
                for x in 0..s {
                    let u = ((x as f64 / sf - 0.5) * dx + (y as f64 / sf - 0.5) * dy) / 0.71;
                    let t = ((u + 1.0) / 2.0).clamp(0.0, 1.0) as f32;
                    let i = (y * s + x) * 3;
                    for c in 0..3 {
                        canvas.data[i + c] = lo[c] + t * (hi[c] - lo[c]);
                    }
                }
            }
        }
        BackgroundKind::Clutter => {
            for px in canvas.data.chunks_exact_mut(3) {
                px.copy_from_slice(&p.skin);
            }
            let blobs = rng.gen_range(3..7);
            for _ in 0..blobs {
                let tone = scale_rgb(p.skin, rng.gen_range(0.8..1.2));
                let (cx, cy) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
                let r = rng.gen_range(0.08..0.25) * sf;
                for y in 0..s {
                    for x in 0..s {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        let alpha = (1.0 - d / r).clamp(0.0, 1.0).powi(2) as f32;
                        canvas.blend(x, y, tone, alpha);
                    }
                }
            }
        }
    }
}

fn paint_eye(canvas: &mut Canvas, g: &EyeGeometry, iris: [f32; 3]) {
    const SCLERA: [f32; 3] = [0.9, 0.88, 0.85];
    const PUPIL: [f32; 3] = [0.03, 0.03, 0.035];
    let s = canvas.side;
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - g.center_x, y as f64 + 0.5 - g.center_y);
            let q = ((dx / g.sclera_a).powi(2) + (dy / g.sclera_b).powi(2)).sqrt();
            // approximate signed distance to the ellipse boundary
            let sclera_d = (q - 1.0) * g.sclera_a.min(g.sclera_b);
            let sc = coverage(sclera_d);
            if sc == 0.0 {
                continue;
            }
            // dim toward the eyelids
            canvas.blend(x, y, scale_rgb(SCLERA, 1.0 - 0.15 * q as f32), sc);
            let r = (dx * dx + dy * dy).sqrt();
            let ic = coverage(r - g.iris_radius) * sc;
            if ic > 0.0 {
                // radial shading with a dark limbal ring
                let u = (r / g.iris_radius) as f32;
                let shade = 0.75 + 0.35 * (1.0 - u) - 0.35 * ((u - 0.92).max(0.0) / 0.08);
                canvas.blend(x, y, scale_rgb(iris, shade), ic);
            }
            let pc = coverage(r - g.pupil_radius) * sc;
            canvas.blend(x, y, PUPIL, pc);
        }
    }
}

// Gain below the current mean, mix toward white above it.
fn match_mean(canvas: &mut Canvas, target: f64) {
    let m = canvas.mean();
    if m <= 0.0 && target > 0.0 {
        canvas.data.iter_mut().for_each(|v| *v = target as f32);
    } else if target <= m {
        let gain = (target / m) as f32;
        canvas.data.iter_mut().for_each(|v| *v *= gain);
    } else {
        let t = ((target - m) / (1.0 - m)) as f32;
        canvas.data.iter_mut().for_each(|v| *v += (1.0 - *v) * t);
    }
}

fn paint_blob(canvas: &mut Canvas, fraction: f64, rng: &mut ChaCha8Rng) {
    let s = canvas.side;
    let target = (fraction * (s * s) as f64).round() as usize;
    if target == 0 {
        return;
    }
    let r = ((target as f64) / std::f64::consts::PI).sqrt();
    let margin = r.min(s as f64 / 2.0);
    let cx = rng.gen_range(margin..=(s as f64 - margin));
    let cy = rng.gen_range(margin..=(s as f64 - margin));
    // the nearest `target` pixels to the centre form the blob
    let mut pixels: Vec<(f64, usize)> = (0..s * s)
        .map(|i| {
            let (x, y) = ((i % s) as f64 + 0.5, (i / s) as f64 + 0.5);
            ((x - cx).powi(2) + (y - cy).powi(2), i)
        })
        .collect();
    pixels.select_nth_unstable_by(target - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &pixels[..target] {
        canvas.data[i * 3..i * 3 + 3].fill(1.0);
    }
}

/// Renders one scene. Output intensities are multiples of 1/255 so that a
/// PNG round trip is exact.
pub fn gen_sample(
    p: &SceneParams,
    good_light: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Result<(PixelImage, HierLabel), SynthError> {
    p.validate()?;
    let side = p.side as usize;
    let mut canvas = Canvas {
        side,
        data: vec![0.0; side * side * 3],
    };
    paint_background(&mut canvas, p, rng);
    if p.eye_present {
        paint_eye(&mut canvas, &p.geometry, p.iris_color);
    }
    match_mean(&mut canvas, p.illumination);
    if p.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, p.noise_std as f32).expect("finite std");
        for v in canvas.data.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
        // clipping shifts the mean; pull it back without adding noise
        match_mean(&mut canvas, p.illumination);
    }
    if p.saturation_blob_fraction > 0.0 {
        paint_blob(&mut canvas, p.saturation_blob_fraction, rng);
    }
    canvas
        .data
        .iter_mut()
        .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    let img = PixelImage::new(side, side, 3, canvas.data)?;
    Ok((img, p.label(good_light)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierCounts {
    pub no_eye: usize,
    pub eye_bad_light: usize,
    pub eye_good_light: usize,
}

impl HierCounts {
    pub fn get(&self, label: HierLabel) -> usize {
        match label {
            HierLabel::NoEye => self.no_eye,
            HierLabel::EyeBadLight => self.eye_bad_light,
            HierLabel::EyeGoodLight => self.eye_good_light,
        }
    }

    pub fn total(&self) -> usize {
        self.no_eye + self.eye_bad_light + self.eye_good_light
    }
}

/// Illumination ranges, as `[low, high]` target means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightingConfig {
    pub good: [f64; 2],
    pub dark: [f64; 2],
    pub bright: [f64; 2],
    /// Range for images without an eye.
    pub no_eye: [f64; 2],
    pub blob_fraction: [f64; 2],
    /// Relative weights of dark, bright and blob among badly lit eyes.
    pub bad_mix: [f64; 3],
}

impl Default for LightingConfig {
    fn default() -> Self {
        Self {
            good: [0.35, 0.7],
            dark: [0.03, 0.18],
            bright: [0.88, 0.96],
            no_eye: [0.05, 0.9],
            blob_fraction: [0.08, 0.2],
            bad_mix: [0.4, 0.3, 0.3],
        }
    }
}

/// Dataset description, read from TOML.
///
/// ```toml
/// seed = 7
/// side = 224
/// noise_std = [0.0, 0.02]
///
/// [counts]
/// no_eye = 100
/// eye_bad_light = 100
/// eye_good_light = 100
///
/// [lighting]
/// good = [0.35, 0.7]
/// dark = [0.03, 0.18]
/// bright = [0.88, 0.96]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub side: u32,
    pub counts: HierCounts,
    pub noise_std: [f64; 2],
    pub lighting: LightingConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            side: DEFAULT_SIDE,
            counts: HierCounts::default(),
            noise_std: [0.0, 0.02],
            lighting: LightingConfig::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&r[0]) && (0.0..=1.0).contains(&r[1]) && r[0] <= r[1] {
        Ok(())
    } else {
        Err(SynthError::InvalidConfig(format!(
            "{name} range {r:?} must satisfy 0 <= low <= high <= 1"
        )))
    }
}

fn disjoint(a: [f64; 2], b: [f64; 2]) -> bool {
    a[1] < b[0] || b[1] < a[0]
}

/// One planned sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSample {
    pub index: usize,
    pub id: String,
    pub label: HierLabel,
    pub params: SceneParams,
}

impl GenConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.side < 32 {
            return Err(SynthError::InvalidConfig("side must be at least 32".into()));
        }
        let l = &self.lighting;
        for (name, r) in [
            ("good", l.good),
            ("dark", l.dark),
            ("bright", l.bright),
            ("no_eye", l.no_eye),
            ("blob_fraction", l.blob_fraction),
        ] {
            check_range(name, r)?;
        }
        if !(self.noise_std[0] >= 0.0 && self.noise_std[0] <= self.noise_std[1]) {
            return Err(SynthError::InvalidConfig(format!(
                "noise_std range {:?}",
                self.noise_std
            )));
        }
        if !disjoint(l.good, l.dark) || !disjoint(l.good, l.bright) {
            return Err(SynthError::InvalidConfig(
                "good lighting range must be disjoint from the dark and bright ranges".into(),
            ));
        }
        if l.blob_fraction[0] <= MAX_GOOD_BLOB_FRACTION {
            return Err(SynthError::InvalidConfig(format!(
                "blob fractions must exceed {MAX_GOOD_BLOB_FRACTION}"
            )));
        }
        if l.bad_mix.iter().any(|w| w.is_nan() || *w < 0.0) || l.bad_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(SynthError::InvalidConfig(
                "bad_mix weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }

    fn sample_rng(&self, index: usize, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((index as u64) << 1) | purpose);
        rng
    }

    /// Scene parameters for the `index`-th sample, which carries `label`.
    pub fn scene(&self, label: HierLabel, index: usize) -> SceneParams {
        let mut rng = self.sample_rng(index, 0);
        let rng = &mut rng;
        let side = f64::from(self.side);
        let l = &self.lighting;
        let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            if r[0] < r[1] {
                rng.gen_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        let mut blob = 0.0;
        let illumination = match label {
            HierLabel::NoEye => draw(rng, l.no_eye),
            HierLabel::EyeGoodLight => draw(rng, l.good),
            HierLabel::EyeBadLight => {
                let total: f64 = l.bad_mix.iter().sum();
                let u = rng.gen_range(0.0..total);
                if u < l.bad_mix[0] {
                    draw(rng, l.dark)
                } else if u < l.bad_mix[0] + l.bad_mix[1] {
                    draw(rng, l.bright)
                } else {
                    blob = draw(rng, l.blob_fraction);
                    draw(rng, l.good)
                }
            }
        };
        let sclera_a = rng.gen_range(0.30..0.40) * side;
        let sclera_b = rng.gen_range(0.18..0.24) * side;
        let iris_radius = rng.gen_range(0.7..0.9) * sclera_b;
        let pupil_radius = rng.gen_range(0.3..0.5) * iris_radius;
        let geometry = EyeGeometry {
            center_x: side / 2.0 + rng.gen_range(-0.06..0.06) * side,
            center_y: side / 2.0 + rng.gen_range(-0.06..0.06) * side,
            sclera_a,
            sclera_b,
            iris_radius,
            pupil_radius,
        };
        let background_kind = *[
            BackgroundKind::Flat,
            BackgroundKind::Gradient,
            BackgroundKind::Clutter,
        ]
        .choose(rng)
        .expect("non-empty");
        let tone = rng.gen_range(0.55..0.85f32);
        let skin = [
            tone,
            tone * rng.gen_range(0.7..0.85),
            tone * rng.gen_range(0.55..0.75),
        ];
        const IRIS: [[f32; 3]; 4] = [
            [0.40, 0.25, 0.14],
            [0.28, 0.42, 0.58],
            [0.32, 0.42, 0.28],
            [0.48, 0.38, 0.20],
        ];
        let iris_color = *IRIS.choose(rng).expect("non-empty");
        SceneParams {
            side: self.side,
            eye_present: label != HierLabel::NoEye,
            illumination,
            saturation_blob_fraction: blob,
            geometry,
            noise_std: draw(rng, self.noise_std),
            background_kind,
            skin,
            iris_color,
        }
    }

    /// All samples in id order: no-eye first, then badly lit, then well lit.
    pub fn plan(&self) -> Vec<PlannedSample> {
        let mut out = Vec::with_capacity(self.counts.total());
        for label in HierLabel::ALL {
            for _ in 0..self.counts.get(label) {
                let index = out.len();
                out.push(PlannedSample {
                    index,
                    id: format!("s{index:05}"),
                    label,
                    params: self.scene(label, index),
                });
            }
        }
        out
    }

    /// Renders a planned sample.
    pub fn render(&self, s: &PlannedSample) -> Result<PixelImage, SynthError> {
        let (img, label) = gen_sample(
            &s.params,
            self.lighting.good,
            &mut self.sample_rng(s.index, 1),
        )?;
        debug_assert_eq!(label, s.label);
        Ok(img)
    }
}

/// Paths of the files written by [`gen_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub manifest: PathBuf,
    pub tier1: PathBuf,
    pub tier2: PathBuf,
    pub rows: Vec<(String, String, HierLabel)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_csv(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<(), SynthError> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes `images/<id>.png`, `manifest.csv` (`id,path,hier_label`),
/// `tier1.csv` (eye present, all samples) and `tier2.csv` (well lit, eye
/// samples only) under `out`.
pub fn gen_dataset(cfg: &GenConfig, out: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    let plan = cfg.plan();
    plan.par_iter().try_for_each(|s| {
        let png = encode_png(&cfg.render(s)?)?;
        let path = images.join(format!("{}.png", s.id));
        std::fs::write(&path, png).map_err(io_err(&path))
    })?;
    let rows: Vec<(String, String, HierLabel)> = plan
        .iter()
        .map(|s| (s.id.clone(), format!("images/{}.png", s.id), s.label))
        .collect();
    let manifest = out.join("manifest.csv");
    write_csv(
        &manifest,
        "id,path,hier_label",
        rows.iter().map(|(id, p, l)| format!("{id},{p},{l}")),
    )?;
    let tier1 = out.join("tier1.csv");
    write_csv(
        &tier1,
        "id,path,label",
        rows.iter()
            .map(|(id, p, l)| format!("{id},{p},{}", u8::from(l.eye_present()))),
    )?;
    let tier2 = out.join("tier2.csv");
    write_csv(
        &tier2,
        "id,path,label",
        rows.iter().filter_map(|(id, p, l)| {
            l.good_light()
                .map(|good| format!("{id},{p},{}", u8::from(good)))
        }),
    )?;
    Ok(DatasetManifest {
        manifest,
        tier1,
        tier2,
        rows,
    })
}
