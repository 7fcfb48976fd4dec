//! First-order (histogram) statistics of a band.

use crate::raster::Raster;

/// Bin count for the first-order entropy histogram.
pub const FIRST_ORDER_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderFeatures {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub entropy: f64,
    /// Set when the band is constant; skewness and kurtosis are reported as 0.
    pub zero_variance: bool,
}

/// Population moments (divide by N), non-excess kurtosis, and Shannon
/// entropy in bits over a 32-bin equal-width histogram of the band's range.
/// Values are summed in sorted order, so any spatial permutation of the
/// band produces bit-identical features.
pub fn first_order_features(band: &Raster) -> FirstOrderFeatures {
    assert!(!band.as_slice().is_empty(), "band must be non-empty");
    let mut data = band.as_slice().to_vec();
    data.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite pixel"));
    let data = &data;
    let n = data.len() as f64;

    let mean = data.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in data {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;

    let zero_variance = m2 <= 0.0;
    let (skewness, kurtosis) = if zero_variance {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };

    FirstOrderFeatures {
        mean,
        variance: m2,
        skewness,
        kurtosis,
        entropy: histogram_entropy(band),
        zero_variance,
    }
}

fn histogram_entropy(band: &Raster) -> f64 {
    let (min, max) = band.min_max();
    let mut counts = [0usize; FIRST_ORDER_BINS];
    if max > min {
        let scale = FIRST_ORDER_BINS as f64 / (max - min);
        for &v in band.as_slice() {
            let bin = (((v - min) * scale) as usize).min(FIRST_ORDER_BINS - 1);
            counts[bin] += 1;
        }
    } else {
        counts[0] = band.as_slice().len();
    }
    let n = band.as_slice().len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_band_is_degenerate() {
        let f = first_order_features(&Raster::from_vec(2, 2, vec![5.0; 4]));
        assert_eq!(f.mean, 5.0);
        assert_eq!(f.variance, 0.0);
        assert_eq!(f.skewness, 0.0);
        assert_eq!(f.kurtosis, 0.0);
        assert_eq!(f.entropy, 0.0);
        assert!(f.zero_variance);
    }

    #[test]
    fn four_pixel_hand_oracle() {
        // {0,0,1,1}: mean 0.5, variance 0.25, skewness 0, kurtosis m4/m2^2 = 1,
        // entropy 1 bit (two occupied bins at probability 0.5 each).
        let f = first_order_features(&Raster::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]));
        assert!((f.mean - 0.5).abs() < 1e-15);
        assert!((f.variance - 0.25).abs() < 1e-15);
        assert!(f.skewness.abs() < 1e-15);
        assert!((f.kurtosis - 1.0).abs() < 1e-15);
        assert!((f.entropy - 1.0).abs() < 1e-15);
        assert!(!f.zero_variance);
    }

    #[test]
    fn symmetric_distribution_has_zero_skewness() {
        let vals: Vec<f64> = (-50..=50).map(f64::from).collect();
        let f = first_order_features(&Raster::from_vec(1, vals.len(), vals));
        assert!(f.skewness.abs() < 1e-10);
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vals: Vec<f64> = (0..256).map(|i| f64::from(i % 37) * 1.5).collect();
        let a = first_order_features(&Raster::from_vec(16, 16, vals.clone()));
        vals.shuffle(&mut rng);
        let b = first_order_features(&Raster::from_vec(16, 16, vals));
        assert_eq!(a, b);
    }
}
