//! Frozen-encoder embeddings of the cleaned RGB composite.
//!
//! The encoder is pluggable: anything that consumes a normalized
//! 3x224x224 tensor and deterministically produces a fixed-dimension
//! vector. [`crate::features::vit::VitEncoder`] runs a patch-16 vision
//! transformer from a weights file; [`ProjectionEncoder`] is a seeded
//! random-projection stand-in used for fixtures and offline runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Encoders consume this square input size.
pub const ENCODER_INPUT_SIZE: usize = 224;

/// ImageNet channel statistics shared by the bundled encoders.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub epiweek: EpiWeek,
    pub values: Vec<f64>,
}

pub trait ImageEncoder: Send + Sync {
    /// Output dimension D, fixed for the encoder's lifetime.
    fn dim(&self) -> usize;

    /// Stable identifier recorded in run metadata and feature manifests.
    fn identity(&self) -> String;

    fn channel_mean(&self) -> [f64; 3];

    fn channel_std(&self) -> [f64; 3];

    /// Forward pass over a normalized CHW tensor of three
    /// `ENCODER_INPUT_SIZE`-square channels.
    fn encode(&self, chw: &[Raster; 3]) -> Result<Vec<f64>>;
}

/// Full-scale reflectance used to place constant scenes on an absolute
/// level when min-max scaling degenerates.
const REFLECTANCE_FULL_SCALE: f64 = 65535.0;

/// Min-max scales the scene to [0,1] (jointly over the three channels),
/// bilinearly resizes to the encoder input size, applies the encoder's
/// per-channel normalization, and runs the frozen encoder. A constant
/// scene keeps its absolute level against the 16-bit full scale.
pub fn embed_rgb(rgb: &[&Raster; 3], encoder: &dyn ImageEncoder) -> Result<Vec<f64>> {
    let shape = rgb[0].shape();
    if rgb.iter().any(|r| r.shape() != shape) {
        return Err(Error::InvalidConfig(
            "RGB channels must share one shape".to_string(),
        ));
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ch in rgb {
        let (mn, mx) = ch.min_max();
        lo = lo.min(mn);
        hi = hi.max(mx);
    }
    let (lo, span) = if hi > lo { (lo, hi - lo) } else { (0.0, REFLECTANCE_FULL_SCALE) };

    let mean = encoder.channel_mean();
    let std = encoder.channel_std();
    let mut chw: [Raster; 3] = std::array::from_fn(|c| {
        let mut scaled = rgb[c].clone();
        for v in scaled.as_mut_slice() {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
        scaled.resize_bilinear(ENCODER_INPUT_SIZE, ENCODER_INPUT_SIZE)
    });
    for (c, ch) in chw.iter_mut().enumerate() {
        for v in ch.as_mut_slice() {
            *v = (*v - mean[c]) / std[c];
        }
    }

    let out = encoder.encode(&chw)?;
    debug_assert_eq!(out.len(), encoder.dim());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "encoder {} produced non-finite values",
            encoder.identity()
        )));
    }
    Ok(out)
}

/// Seeded random projection followed by tanh: a deterministic frozen
/// featurizer with the encoder contract, used where pretrained transformer
/// weights are unavailable (tests, fixtures, offline runs).
pub struct ProjectionEncoder {
    seed: u64,
    dim: usize,
    /// dim x (3*224*224) projection, generated once from the seed.
    weights: Vec<f64>,
}

impl ProjectionEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0);
        let n_in = 3 * ENCODER_INPUT_SIZE * ENCODER_INPUT_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights = (0..dim * n_in)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        ProjectionEncoder { seed, dim, weights }
    }
}

impl ImageEncoder for ProjectionEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("projection:{}:{}", self.seed, self.dim)
    }

    fn channel_mean(&self) -> [f64; 3] {
        IMAGENET_MEAN
    }

    fn channel_std(&self) -> [f64; 3] {
        IMAGENET_STD
    }

    fn encode(&self, chw: &[Raster; 3]) -> Result<Vec<f64>> {
        let px = ENCODER_INPUT_SIZE * ENCODER_INPUT_SIZE;
        let n_in = 3 * px;
        let mut out = Vec::with_capacity(self.dim);
        for k in 0..self.dim {
            let row = &self.weights[k * n_in..(k + 1) * n_in];
            let mut acc = 0.0;
            for (c, ch) in chw.iter().enumerate() {
                let row_c = &row[c * px..(c + 1) * px];
                for (w, v) in row_c.iter().zip(ch.as_slice()) {
                    acc += w * v;
                }
            }
            out.push(acc.tanh());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(shape: usize, value: f64) -> Raster {
        Raster::from_vec(shape, shape, vec![value; shape * shape])
    }

    #[test]
    fn embedding_has_encoder_dimension_and_is_finite() {
        let enc = ProjectionEncoder::new(7, 12);
        let r = Raster::from_vec(64, 64, (0..64 * 64).map(|i| f64::from(i % 251)).collect());
        let e = embed_rgb(&[&r, &r, &r], &enc).unwrap();
        assert_eq!(e.len(), 12);
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedding_is_deterministic() {
        let enc = ProjectionEncoder::new(7, 8);
        let r = Raster::from_vec(32, 32, (0..1024).map(|i| f64::from(i % 97)).collect());
        let a = embed_rgb(&[&r, &r, &r], &enc).unwrap();
        let b = embed_rgb(&[&r, &r, &r], &enc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn black_and_white_scenes_embed_differently() {
        let enc = ProjectionEncoder::new(7, 16);
        let black = flat(64, 0.0);
        let white = flat(64, 65535.0);
        let a = embed_rgb(&[&black, &black, &black], &enc).unwrap();
        let b = embed_rgb(&[&white, &white, &white], &enc).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 0.999);
    }

    #[test]
    fn mismatched_channel_shapes_are_rejected() {
        let enc = ProjectionEncoder::new(1, 4);
        let a = flat(16, 1.0);
        let b = Raster::zeros(8, 16);
        assert!(embed_rgb(&[&a, &a, &b], &enc).is_err());
    }
}
