use crate::imaging::{haar_dwt2, PlaneTensor};

use super::DetectorError;

pub const HIST_BINS: usize = 16;
/// 3 means, 3 stds, 16 histogram bins, 7 subband energies x 3 channels, bias.
pub const FEATURE_LEN: usize = 3 + 3 + HIST_BINS + 21 + 1;
pub const FEATURE_LAYOUT: &str = "mean3-std3-hist16-haar2x7x3-bias/v1";

const CHANNELS: usize = 3;
const LEVELS: u32 = 2;

/// Engineered image descriptor consumed by the logistic detector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn means(&self) -> &[f64] {
        &self.0[0..3]
    }

    pub fn stds(&self) -> &[f64] {
        &self.0[3..6]
    }

    pub fn histogram(&self) -> &[f64] {
        &self.0[6..6 + HIST_BINS]
    }

    /// Subband energies of one channel, ordered LL2, LH2, HL2, HH2, LH1, HL1, HH1.
    pub fn energies(&self, channel: usize) -> &[f64] {
        let start = 6 + HIST_BINS + channel * 7;
        &self.0[start..start + 7]
    }
}

/// Computes the fixed 44-value layout from a 3-channel tensor whose sides
/// are divisible by 4.
///
/// The histogram pools all channels and clamps values into `[0, 1]`.
/// Energies are mean squared coefficients per subband of the 2-level
/// orthonormal Haar transform.
pub fn extract_features(t: &PlaneTensor) -> Result<FeatureVector, DetectorError> {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    if c != CHANNELS || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(DetectorError::ShapeMismatch(format!(
            "expected 3 x H x W with H, W divisible by 4, got {c}x{h}x{w}"
        )));
    }
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(FEATURE_LEN);
    let mut stds = Vec::with_capacity(CHANNELS);
    let mut hist = [0u64; HIST_BINS];
    for ch in 0..CHANNELS {
        let plane = t.plane(ch);
        let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = plane
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n;
        out.push(mean);
        stds.push(var.sqrt());
        for &v in plane {
            let bin = (v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize;
            hist[bin.min(HIST_BINS - 1)] += 1;
        }
    }
    out.extend(stds);
    let pooled = n * CHANNELS as f64;
    out.extend(hist.iter().map(|&k| k as f64 / pooled));

    let coeffs = haar_dwt2(t, LEVELS)?;
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
    let bands = [
        (0, h4, 0, w4),
        (0, h4, w4, w2),
        (h4, h2, 0, w4),
        (h4, h2, w4, w2),
        (0, h2, w2, w),
        (h2, h, 0, w2),
        (h2, h, w2, w),
    ];
    for ch in 0..CHANNELS {
        let plane = coeffs.plane(ch);
        for &(y0, y1, x0, x1) in &bands {
            let mut sum = 0.0;
            for y in y0..y1 {
                for &v in &plane[y * w + x0..y * w + x1] {
                    sum += f64::from(v) * f64::from(v);
                }
            }
            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out.push(1.0);
    debug_assert_eq!(out.len(), FEATURE_LEN);
    Ok(FeatureVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_tensor() {
        let f = extract_features(&PlaneTensor::zeros(3, 224, 224)).unwrap();
        assert_eq!(f.len(), 44);
        assert_eq!(f.means(), &[0.0; 3]);
        assert_eq!(f.stds(), &[0.0; 3]);
        assert_eq!(f.histogram()[0], 1.0);
        assert!(f.histogram()[1..].iter().all(|&v| v == 0.0));
        for c in 0..3 {
            assert!(f.energies(c).iter().all(|&e| e == 0.0));
        }
        assert_eq!(f.as_slice()[43], 1.0);
    }

    #[test]
    fn constant_half_matches_transform_then_sum() {
        let t = PlaneTensor::filled(3, 224, 224, 0.5);
        let f = extract_features(&t).unwrap();
        assert_eq!(f.means(), &[0.5; 3]);
        assert_eq!(f.stds(), &[0.0; 3]);
        assert_eq!(f.histogram()[8], 1.0);

        // oracle: transform, then sum squares over the 56x56 LL2 block
        let coeffs = haar_dwt2(&t, 2).unwrap();
        let mut ll = 0.0;
        for y in 0..56 {
            for x in 0..56 {
                ll += f64::from(coeffs.at(0, y, x)).powi(2);
            }
        }
        let ll = ll / (56.0 * 56.0);
        for c in 0..3 {
            let e = f.energies(c);
            assert!((e[0] - ll).abs() < 1e-9);
            assert!((e[0] - (4.0f64 * 0.5).powi(2)).abs() < 1e-9);
            assert!(e[1..].iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn random_histogram_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..3 * 32 * 32).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let f = extract_features(&PlaneTensor::new(3, 32, 32, data).unwrap()).unwrap();
        let mass: f64 = f.histogram().iter().sum();
        assert!((mass - 1.0).abs() < 1e-9);
        for c in 0..3 {
            assert!(f.energies(c).iter().all(|&e| e >= 0.0));
        }
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        assert!(matches!(
            extract_features(&PlaneTensor::zeros(1, 224, 224)),
            Err(DetectorError::ShapeMismatch(_))
        ));
        assert!(matches!(
            extract_features(&PlaneTensor::zeros(3, 30, 30)),
            Err(DetectorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen()).collect();
        let t = PlaneTensor::new(3, 16, 16, data).unwrap();
        assert_eq!(extract_features(&t).unwrap(), extract_features(&t).unwrap());
    }
}
