//! Gray-level co-occurrence texture features.

use serde::{Deserialize, Serialize};

use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlcmSpec {
    pub n_gray_levels: usize,
    /// Pixel displacements as (row, col) deltas.
    pub offsets: Vec<(i32, i32)>,
    pub symmetric: bool,
}

impl Default for GlcmSpec {
    fn default() -> Self {
        GlcmSpec {
            n_gray_levels: 32,
            offsets: vec![(0, 1), (1, 0), (1, 1), (1, -1)],
            symmetric: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlcmFeatures {
    pub joint_average: f64,
    pub joint_entropy: f64,
    pub contrast: f64,
    pub correlation: f64,
    /// Set when correlation is undefined (a single occupied gray level).
    pub single_gray_level: bool,
}

/// Equal-width quantization of the band's min-max range into `levels` bins.
pub fn quantize(band: &Raster, levels: usize) -> Vec<usize> {
    assert!(levels >= 1);
    let (min, max) = band.min_max();
    if max <= min {
        return vec![0; band.as_slice().len()];
    }
    let scale = levels as f64 / (max - min);
    band.as_slice()
        .iter()
        .map(|&v| (((v - min) * scale) as usize).min(levels - 1))
        .collect()
}

/// Normalized co-occurrence matrix for one offset, or `None` when the offset
/// produces no in-bounds pixel pairs.
pub fn co_occurrence(
    quantized: &[usize],
    shape: (usize, usize),
    levels: usize,
    offset: (i32, i32),
    symmetric: bool,
) -> Option<Vec<f64>> {
    let (h, w) = shape;
    debug_assert_eq!(quantized.len(), h * w);
    let mut counts = vec![0.0f64; levels * levels];
    let mut total = 0.0f64;
    for r in 0..h as i32 {
        for c in 0..w as i32 {
            let r2 = r + offset.0;
            let c2 = c + offset.1;
            if r2 < 0 || r2 >= h as i32 || c2 < 0 || c2 >= w as i32 {
                continue;
            }
            let i = quantized[r as usize * w + c as usize];
            let j = quantized[r2 as usize * w + c2 as usize];
            counts[i * levels + j] += 1.0;
            total += 1.0;
            if symmetric {
                counts[j * levels + i] += 1.0;
                total += 1.0;
            }
        }
    }
    if total == 0.0 {
        return None;
    }
    for v in &mut counts {
        *v /= total;
    }
    Some(counts)
}

fn features_of_matrix(p: &[f64], levels: usize) -> GlcmFeatures {
    let mut joint_average = 0.0;
    let mut joint_entropy = 0.0;
    let mut contrast = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            let pij = p[i * levels + j];
            if pij <= 0.0 {
                continue;
            }
            joint_average += i as f64 * pij;
            joint_entropy -= pij * pij.log2();
            let d = i as f64 - j as f64;
            contrast += d * d * pij;
        }
    }

    // Marginals for the correlation term.
    let mut pi = vec![0.0f64; levels];
    let mut pj = vec![0.0f64; levels];
    for i in 0..levels {
        for j in 0..levels {
            pi[i] += p[i * levels + j];
            pj[j] += p[i * levels + j];
        }
    }
    let mu_i: f64 = pi.iter().enumerate().map(|(i, &v)| i as f64 * v).sum();
    let mu_j: f64 = pj.iter().enumerate().map(|(j, &v)| j as f64 * v).sum();
    let var_i: f64 = pi.iter().enumerate().map(|(i, &v)| (i as f64 - mu_i).powi(2) * v).sum();
    let var_j: f64 = pj.iter().enumerate().map(|(j, &v)| (j as f64 - mu_j).powi(2) * v).sum();

    let denom = (var_i * var_j).sqrt();
    let (correlation, single_gray_level) = if denom <= 0.0 {
        (0.0, true)
    } else {
        let mut cov = 0.0;
        for i in 0..levels {
            for j in 0..levels {
                cov += (i as f64 - mu_i) * (j as f64 - mu_j) * p[i * levels + j];
            }
        }
        ((cov / denom).clamp(-1.0, 1.0), false)
    };

    GlcmFeatures { joint_average, joint_entropy, contrast, correlation, single_gray_level }
}

/// Per-offset features averaged over the spec's offsets. Offsets with no
/// in-bounds pairs are skipped.
pub fn glcm_features(band: &Raster, spec: &GlcmSpec) -> GlcmFeatures {
    assert!(!spec.offsets.is_empty(), "glcm needs at least one offset");
    let quantized = quantize(band, spec.n_gray_levels);
    let mut acc = GlcmFeatures {
        joint_average: 0.0,
        joint_entropy: 0.0,
        contrast: 0.0,
        correlation: 0.0,
        single_gray_level: false,
    };
    let mut used = 0usize;
    for &offset in &spec.offsets {
        let Some(p) = co_occurrence(&quantized, band.shape(), spec.n_gray_levels, offset, spec.symmetric)
        else {
            continue;
        };
        let f = features_of_matrix(&p, spec.n_gray_levels);
        acc.joint_average += f.joint_average;
        acc.joint_entropy += f.joint_entropy;
        acc.contrast += f.contrast;
        acc.correlation += f.correlation;
        acc.single_gray_level |= f.single_gray_level;
        used += 1;
    }
    if used == 0 {
        return GlcmFeatures {
            joint_average: 0.0,
            joint_entropy: 0.0,
            contrast: 0.0,
            correlation: 0.0,
            single_gray_level: true,
        };
    }
    acc.joint_average /= used as f64;
    acc.joint_entropy /= used as f64;
    acc.contrast /= used as f64;
    acc.correlation /= used as f64;
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn horizontal_spec(levels: usize) -> GlcmSpec {
        GlcmSpec { n_gray_levels: levels, offsets: vec![(0, 1)], symmetric: true }
    }

    #[test]
    fn two_row_band_by_hand() {
        // [[0,0],[1,1]], horizontal offset, 2 levels. The two in-row pairs
        // are (0,0) and (1,1); symmetrized P(0,0)=P(1,1)=0.5.
        let band = Raster::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let f = glcm_features(&band, &horizontal_spec(2));
        assert!((f.contrast - 0.0).abs() < 1e-15);
        assert!((f.correlation - 1.0).abs() < 1e-15);
        assert!((f.joint_average - 0.5).abs() < 1e-15);
        assert!((f.joint_entropy - 1.0).abs() < 1e-15);
        assert!(!f.single_gray_level);
    }

    #[test]
    fn checkerboard_by_hand() {
        // Every horizontal pair differs: P(0,1)=P(1,0)=0.5, so contrast 1 and
        // correlation -1.
        let mut band = Raster::zeros(8, 8);
        for r in 0..8 {
            for c in 0..8 {
                band.set(r, c, ((r + c) % 2) as f64);
            }
        }
        let f = glcm_features(&band, &horizontal_spec(2));
        assert!((f.contrast - 1.0).abs() < 1e-15);
        assert!((f.correlation + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_band_is_single_level() {
        let band = Raster::from_vec(4, 4, vec![9.0; 16]);
        let f = glcm_features(&band, &GlcmSpec::default());
        assert_eq!(f.contrast, 0.0);
        assert_eq!(f.joint_entropy, 0.0);
        assert_eq!(f.correlation, 0.0);
        assert!(f.single_gray_level);
    }

    #[test]
    fn matrices_normalize_to_one_for_every_offset() {
        let band = Raster::from_vec(6, 6, (0..36).map(|i| f64::from(i * 7 % 23)).collect());
        let spec = GlcmSpec::default();
        let q = quantize(&band, spec.n_gray_levels);
        for &offset in &spec.offsets {
            let p = co_occurrence(&q, band.shape(), spec.n_gray_levels, offset, true).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "offset {offset:?} sums to {sum}");
        }
    }

    #[test]
    fn offsets_without_pairs_are_skipped() {
        // Single-row raster has no vertical pairs.
        let band = Raster::from_vec(1, 8, (0..8).map(f64::from).collect());
        let spec = GlcmSpec { n_gray_levels: 4, offsets: vec![(1, 0)], symmetric: true };
        let f = glcm_features(&band, &spec);
        assert!(f.single_gray_level);
        assert_eq!(f.contrast, 0.0);
    }
}
