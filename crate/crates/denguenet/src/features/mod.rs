//! Per-week spatial feature extraction: the 9-value statistical texture
//! vector from the cleaned SWIR band and a frozen-encoder embedding from the
//! cleaned RGB composite.

pub mod embed;
pub mod firstorder;
pub mod glcm;
pub mod vit;

pub use embed::{embed_rgb, EmbeddingVector, ImageEncoder, ProjectionEncoder, ENCODER_INPUT_SIZE};
pub use firstorder::{first_order_features, FirstOrderFeatures};
pub use glcm::{glcm_features, GlcmFeatures, GlcmSpec};

use crate::raster::Raster;

/// Column order of the texture vector everywhere it is persisted.
pub const TEXTURE_FEATURE_NAMES: [&str; 9] = [
    "mean",
    "variance",
    "skewness",
    "kurtosis",
    "entropy",
    "joint_average",
    "joint_entropy",
    "contrast",
    "correlation",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DegenerateFlags {
    pub zero_variance: bool,
    pub single_gray_level: bool,
}

impl DegenerateFlags {
    pub fn any(&self) -> bool {
        self.zero_variance || self.single_gray_level
    }
}

/// The nine texture values in the fixed [`TEXTURE_FEATURE_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiomicsVector {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub entropy: f64,
    pub joint_average: f64,
    pub joint_entropy: f64,
    pub contrast: f64,
    pub correlation: f64,
    pub flags: DegenerateFlags,
}

impl RadiomicsVector {
    pub fn values(&self) -> [f64; 9] {
        [
            self.mean,
            self.variance,
            self.skewness,
            self.kurtosis,
            self.entropy,
            self.joint_average,
            self.joint_entropy,
            self.contrast,
            self.correlation,
        ]
    }

    pub fn from_values(values: [f64; 9], flags: DegenerateFlags) -> Self {
        RadiomicsVector {
            mean: values[0],
            variance: values[1],
            skewness: values[2],
            kurtosis: values[3],
            entropy: values[4],
            joint_average: values[5],
            joint_entropy: values[6],
            contrast: values[7],
            correlation: values[8],
            flags,
        }
    }
}

/// First-order and co-occurrence features of a cleaned band, concatenated.
pub fn extract_texture(band: &Raster, spec: &GlcmSpec) -> RadiomicsVector {
    let fo = first_order_features(band);
    let gl = glcm_features(band, spec);
    let v = RadiomicsVector {
        mean: fo.mean,
        variance: fo.variance,
        skewness: fo.skewness,
        kurtosis: fo.kurtosis,
        entropy: fo.entropy,
        joint_average: gl.joint_average,
        joint_entropy: gl.joint_entropy,
        contrast: gl.contrast,
        correlation: gl.correlation,
        flags: DegenerateFlags {
            zero_variance: fo.zero_variance,
            single_gray_level: gl.single_gray_level,
        },
    };
    debug_assert!(v.variance >= 0.0);
    debug_assert!(v.entropy >= 0.0);
    debug_assert!(v.joint_entropy >= 0.0);
    debug_assert!(v.contrast >= 0.0);
    debug_assert!((-1.0..=1.0).contains(&v.correlation));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_band_yields_flagged_zero_vector() {
        let v = extract_texture(&Raster::from_vec(4, 4, vec![3.0; 16]), &GlcmSpec::default());
        assert_eq!(
            v.values(),
            [3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert!(v.flags.zero_variance);
        assert!(v.flags.single_gray_level);
    }

    #[test]
    fn deterministic_on_identical_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(0.0..1000.0)).collect();
        let band = Raster::from_vec(64, 64, data);
        let a = extract_texture(&band, &GlcmSpec::default());
        let b = extract_texture(&band.clone(), &GlcmSpec::default());
        assert_eq!(a, b);
    }

    /// Straight-from-the-definitions recomputation used as an oracle. It
    /// shares no code with the implementation above.
    fn reference_texture(pixels: &[f64], h: usize, w: usize, levels: usize) -> [f64; 9] {
        let n = pixels.len() as f64;
        let mean = pixels.iter().sum::<f64>() / n;
        let cm = |k: i32| pixels.iter().map(|&x| (x - mean).powi(k)).sum::<f64>() / n;
        let var = cm(2);
        let skew = cm(3) / var.powf(1.5);
        let kurt = cm(4) / (var * var);

        let lo = pixels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut hist = vec![0.0f64; 32];
        for &x in pixels {
            let b = (((x - lo) / (hi - lo) * 32.0) as usize).min(31);
            hist[b] += 1.0;
        }
        let entropy: f64 = hist
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).log2())
            .sum();

        let q: Vec<usize> = pixels
            .iter()
            .map(|&x| (((x - lo) / (hi - lo) * levels as f64) as usize).min(levels - 1))
            .collect();

        let mut ja = 0.0;
        let mut je = 0.0;
        let mut con = 0.0;
        let mut cor = 0.0;
        for (dr, dc) in [(0i32, 1i32), (1, 0), (1, 1), (1, -1)] {
            let mut m = vec![0.0f64; levels * levels];
            let mut tot = 0.0;
            for r in 0..h as i32 {
                for c in 0..w as i32 {
                    let (r2, c2) = (r + dr, c + dc);
                    if r2 < 0 || c2 < 0 || r2 >= h as i32 || c2 >= w as i32 {
                        continue;
                    }
                    let a = q[r as usize * w + c as usize];
                    let b = q[r2 as usize * w + c2 as usize];
                    m[a * levels + b] += 1.0;
                    m[b * levels + a] += 1.0;
                    tot += 2.0;
                }
            }
            for v in &mut m {
                *v /= tot;
            }
            let p = |i: usize, j: usize| m[i * levels + j];
            let mut mu = 0.0;
            for i in 0..levels {
                for j in 0..levels {
                    mu += i as f64 * p(i, j);
                }
            }
            let mut sigma2 = 0.0;
            for i in 0..levels {
                let pr: f64 = (0..levels).map(|j| p(i, j)).sum();
                sigma2 += (i as f64 - mu).powi(2) * pr;
            }
            let mut cov = 0.0;
            for i in 0..levels {
                for j in 0..levels {
                    ja += i as f64 * p(i, j) / 4.0;
                    if p(i, j) > 0.0 {
                        je -= p(i, j) * p(i, j).log2() / 4.0;
                    }
                    con += (i as f64 - j as f64).powi(2) * p(i, j) / 4.0;
                    cov += (i as f64 - mu) * (j as f64 - mu) * p(i, j);
                }
            }
            cor += cov / sigma2 / 4.0;
        }
        [mean, var, skew, kurt, entropy, ja, je, con, cor]
    }

    #[test]
    fn matches_reference_formulas_on_fixture_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let data: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(50.0..900.0)).collect();
        let band = Raster::from_vec(32, 32, data.clone());
        let got = extract_texture(&band, &GlcmSpec::default()).values();
        let want = reference_texture(&data, 32, 32, 32);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!(
                (g - w).abs() < 1e-6,
                "{} differs: got {g}, want {w}",
                TEXTURE_FEATURE_NAMES[i]
            );
        }
    }
}
