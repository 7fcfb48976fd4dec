//! Minimal vision-transformer encoder (patch embedding, pre-norm attention
//! blocks, class-token or mean pooling) plus a self-describing weights file.
//!
//! Weights file layout, little-endian:
//! `b"VITW0001"`, `u32` manifest length, JSON manifest, then raw `f32`
//! tensor data in the manifest's order. Patch vectors are flattened
//! channel-major `(c, dy, dx)`; linear weights are stored `[out, in]`.
//! LayerNorm epsilon is 1e-6 and the MLP activation is tanh-approximated
//! GELU, matching the usual pretrained-export conventions.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::embed::{ImageEncoder, IMAGENET_MEAN, IMAGENET_STD};
use crate::raster::Raster;

const MAGIC: &[u8; 8] = b"VITW0001";
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Class-token representation.
    Cls,
    /// Mean of the patch tokens.
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VitConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch: usize,
    pub image: usize,
    pub pool: Pooling,
}

impl VitConfig {
    pub fn n_patches(&self) -> usize {
        (self.image / self.patch) * (self.image / self.patch)
    }

    fn validate(&self) -> Result<()> {
        if !self.image.is_multiple_of(self.patch) {
            return Err(Error::EncoderWeights(format!(
                "image {} not divisible by patch {}",
                self.image, self.patch
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::EncoderWeights(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    config: VitConfig,
    mean: [f64; 3],
    std: [f64; 3],
    tensors: Vec<TensorInfo>,
}

struct Block {
    ln1_w: Array1<f64>,
    ln1_b: Array1<f64>,
    qkv_w: Array2<f64>,
    qkv_b: Array1<f64>,
    proj_w: Array2<f64>,
    proj_b: Array1<f64>,
    ln2_w: Array1<f64>,
    ln2_b: Array1<f64>,
    fc1_w: Array2<f64>,
    fc1_b: Array1<f64>,
    fc2_w: Array2<f64>,
    fc2_b: Array1<f64>,
}

pub struct VitEncoder {
    config: VitConfig,
    mean: [f64; 3],
    std: [f64; 3],
    patch_w: Array2<f64>,
    patch_b: Array1<f64>,
    cls_token: Array1<f64>,
    pos_embed: Array2<f64>,
    blocks: Vec<Block>,
    ln_final_w: Array1<f64>,
    ln_final_b: Array1<f64>,
    identity: String,
}

impl std::fmt::Debug for VitEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VitEncoder")
            .field("identity", &self.identity)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

/// Canonical tensor order for a given architecture.
fn expected_tensors(c: &VitConfig) -> Vec<TensorInfo> {
    let d = c.hidden;
    let mut out = vec![
        TensorInfo { name: "patch_embed.weight".into(), shape: vec![d, 3 * c.patch * c.patch] },
        TensorInfo { name: "patch_embed.bias".into(), shape: vec![d] },
        TensorInfo { name: "cls_token".into(), shape: vec![d] },
        TensorInfo { name: "pos_embed".into(), shape: vec![c.n_patches() + 1, d] },
    ];
    for i in 0..c.layers {
        let pre = format!("blocks.{i}");
        out.push(TensorInfo { name: format!("{pre}.ln1.weight"), shape: vec![d] });
        out.push(TensorInfo { name: format!("{pre}.ln1.bias"), shape: vec![d] });
        out.push(TensorInfo { name: format!("{pre}.attn.qkv.weight"), shape: vec![3 * d, d] });
        out.push(TensorInfo { name: format!("{pre}.attn.qkv.bias"), shape: vec![3 * d] });
        out.push(TensorInfo { name: format!("{pre}.attn.proj.weight"), shape: vec![d, d] });
        out.push(TensorInfo { name: format!("{pre}.attn.proj.bias"), shape: vec![d] });
        out.push(TensorInfo { name: format!("{pre}.ln2.weight"), shape: vec![d] });
        out.push(TensorInfo { name: format!("{pre}.ln2.bias"), shape: vec![d] });
        out.push(TensorInfo { name: format!("{pre}.mlp.fc1.weight"), shape: vec![c.mlp_dim, d] });
        out.push(TensorInfo { name: format!("{pre}.mlp.fc1.bias"), shape: vec![c.mlp_dim] });
        out.push(TensorInfo { name: format!("{pre}.mlp.fc2.weight"), shape: vec![d, c.mlp_dim] });
        out.push(TensorInfo { name: format!("{pre}.mlp.fc2.bias"), shape: vec![d] });
    }
    out.push(TensorInfo { name: "ln_final.weight".into(), shape: vec![d] });
    out.push(TensorInfo { name: "ln_final.bias".into(), shape: vec![d] });
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(x: &Array2<f64>, w: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * w[i] + b[i];
        }
    }
    out
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    for mut row in out.axis_iter_mut(Axis(0)) {
        row += b;
    }
    out
}

impl VitEncoder {
    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// Loads weights from a file written in the format above. A missing or
    /// malformed file is a startup error; there is no fallback init.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| {
            Error::EncoderWeights(format!("cannot open {}: {e}", path.display()))
        })?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|e| Error::EncoderWeights(format!("short header: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::EncoderWeights(format!(
                "{} is not a vit weights file",
                path.display()
            )));
        }
        let mut len4 = [0u8; 4];
        file.read_exact(&mut len4)
            .map_err(|e| Error::EncoderWeights(format!("short header: {e}")))?;
        let mlen = u32::from_le_bytes(len4) as usize;
        let mut mbytes = vec![0u8; mlen];
        file.read_exact(&mut mbytes)
            .map_err(|e| Error::EncoderWeights(format!("short manifest: {e}")))?;
        let manifest: Manifest = serde_json::from_slice(&mbytes)
            .map_err(|e| Error::EncoderWeights(format!("bad manifest: {e}")))?;
        manifest.config.validate()?;

        let expected = expected_tensors(&manifest.config);
        if manifest.tensors.len() != expected.len() {
            return Err(Error::EncoderWeights(format!(
                "expected {} tensors, manifest lists {}",
                expected.len(),
                manifest.tensors.len()
            )));
        }
        for (got, want) in manifest.tensors.iter().zip(&expected) {
            if got.name != want.name || got.shape != want.shape {
                return Err(Error::EncoderWeights(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }

        let mut read_tensor = |info: &TensorInfo| -> Result<Vec<f64>> {
            let n: usize = info.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            file.read_exact(&mut buf).map_err(|e| {
                Error::EncoderWeights(format!("short data for {}: {e}", info.name))
            })?;
            Ok(buf
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect())
        };

        let mut queue: std::collections::VecDeque<(Vec<f64>, Vec<usize>)> = std::collections::VecDeque::new();
        for info in &expected {
            queue.push_back((read_tensor(info)?, info.shape.clone()));
        }
        fn pop1(q: &mut std::collections::VecDeque<(Vec<f64>, Vec<usize>)>) -> Array1<f64> {
            let (data, _) = q.pop_front().expect("tensor count checked");
            Array1::from_vec(data)
        }
        fn pop2(q: &mut std::collections::VecDeque<(Vec<f64>, Vec<usize>)>) -> Array2<f64> {
            let (data, shape) = q.pop_front().expect("tensor count checked");
            Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked")
        }

        let c = manifest.config.clone();
        let q = &mut queue;
        let patch_w = pop2(q);
        let patch_b = pop1(q);
        let cls_token = pop1(q);
        let pos_embed = pop2(q);
        let mut blocks = Vec::with_capacity(c.layers);
        for _ in 0..c.layers {
            blocks.push(Block {
                ln1_w: pop1(q),
                ln1_b: pop1(q),
                qkv_w: pop2(q),
                qkv_b: pop1(q),
                proj_w: pop2(q),
                proj_b: pop1(q),
                ln2_w: pop1(q),
                ln2_b: pop1(q),
                fc1_w: pop2(q),
                fc1_b: pop1(q),
                fc2_w: pop2(q),
                fc2_b: pop1(q),
            });
        }
        let ln_final_w = pop1(q);
        let ln_final_b = pop1(q);

        let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(VitEncoder {
            identity: format!("vit:{file_name}:{}d{}l", c.hidden, c.layers),
            config: c,
            mean: manifest.mean,
            std: manifest.std,
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            ln_final_w,
            ln_final_b,
        })
    }

    /// Writes the weights back out in the file format above.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            config: self.config.clone(),
            mean: self.mean,
            std: self.std,
            tensors: expected_tensors(&self.config),
        };
        let mbytes = serde_json::to_vec(&manifest)?;
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let werr = |e| Error::io(format!("write {}", path.display()), e);
        file.write_all(MAGIC).map_err(werr)?;
        file.write_all(&(mbytes.len() as u32).to_le_bytes()).map_err(werr)?;
        file.write_all(&mbytes).map_err(werr)?;

        let dump1 = |a: &Array1<f64>| -> Vec<u8> {
            a.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
        };
        let dump2 = |a: &Array2<f64>| -> Vec<u8> {
            a.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
        };
        let mut chunks: Vec<Vec<u8>> = vec![
            dump2(&self.patch_w),
            dump1(&self.patch_b),
            dump1(&self.cls_token),
            dump2(&self.pos_embed),
        ];
        for b in &self.blocks {
            chunks.push(dump1(&b.ln1_w));
            chunks.push(dump1(&b.ln1_b));
            chunks.push(dump2(&b.qkv_w));
            chunks.push(dump1(&b.qkv_b));
            chunks.push(dump2(&b.proj_w));
            chunks.push(dump1(&b.proj_b));
            chunks.push(dump1(&b.ln2_w));
            chunks.push(dump1(&b.ln2_b));
            chunks.push(dump2(&b.fc1_w));
            chunks.push(dump1(&b.fc1_b));
            chunks.push(dump2(&b.fc2_w));
            chunks.push(dump1(&b.fc2_b));
        }
        chunks.push(dump1(&self.ln_final_w));
        chunks.push(dump1(&self.ln_final_b));
        for chunk in chunks {
            file.write_all(&chunk).map_err(werr)?;
        }
        Ok(())
    }

    /// Deterministic synthetic weights exercising the full architecture.
    /// Not pretrained; fixtures and contract tests only.
    pub fn synthetic(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * a)
        };
        let d = config.hidden;
        let patch_w = mat(d, 3 * config.patch * config.patch);
        let patch_b = Array1::zeros(d);
        let cls_token = mat(1, d).row(0).to_owned();
        let pos_embed = mat(config.n_patches() + 1, d) * 0.1;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                ln1_w: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                qkv_w: mat(3 * d, d),
                qkv_b: Array1::zeros(3 * d),
                proj_w: mat(d, d),
                proj_b: Array1::zeros(d),
                ln2_w: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                fc1_w: mat(config.mlp_dim, d),
                fc1_b: Array1::zeros(config.mlp_dim),
                fc2_w: mat(d, config.mlp_dim),
                fc2_b: Array1::zeros(d),
            });
        }
        Ok(VitEncoder {
            identity: format!("vit:synthetic-{seed}:{}d{}l", d, config.layers),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            ln_final_w: Array1::ones(d),
            ln_final_b: Array1::zeros(d),
            config,
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
        })
    }

    fn attention(&self, x: &Array2<f64>, b: &Block) -> Array2<f64> {
        let t = x.nrows();
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let qkv = linear(x, &b.qkv_w, &b.qkv_b);
        let mut out = Array2::<f64>::zeros((t, d));
        for h in 0..heads {
            let q = qkv.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(ndarray::s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(ndarray::s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            // Row-wise softmax, max-shifted.
            for mut row in scores.axis_iter_mut(Axis(0)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            let head_out = scores.dot(&v);
            out.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]).assign(&head_out);
        }
        linear(&out, &b.proj_w, &b.proj_b)
    }

    fn forward(&self, chw: &[Raster; 3]) -> Array2<f64> {
        let c = &self.config;
        let grid = c.image / c.patch;
        let n = c.n_patches();
        let mut tokens = Array2::<f64>::zeros((n + 1, c.hidden));

        // Patch embedding: channel-major flatten of each patch, then linear.
        let mut patch_vec = vec![0.0f64; 3 * c.patch * c.patch];
        for py in 0..grid {
            for px in 0..grid {
                let mut k = 0;
                for ch in chw {
                    for dy in 0..c.patch {
                        for dx in 0..c.patch {
                            patch_vec[k] = ch.get(py * c.patch + dy, px * c.patch + dx);
                            k += 1;
                        }
                    }
                }
                let row = 1 + py * grid + px;
                for (j, w_row) in self.patch_w.axis_iter(Axis(0)).enumerate() {
                    let mut acc = self.patch_b[j];
                    for (w, x) in w_row.iter().zip(&patch_vec) {
                        acc += w * x;
                    }
                    tokens[[row, j]] = acc;
                }
            }
        }
        for j in 0..c.hidden {
            tokens[[0, j]] = self.cls_token[j];
        }
        tokens += &self.pos_embed;

        let mut x = tokens;
        for b in &self.blocks {
            let attn = self.attention(&layer_norm(&x, &b.ln1_w, &b.ln1_b), b);
            x += &attn;
            let y = layer_norm(&x, &b.ln2_w, &b.ln2_b);
            let mut h = linear(&y, &b.fc1_w, &b.fc1_b);
            h.mapv_inplace(gelu);
            let m = linear(&h, &b.fc2_w, &b.fc2_b);
            x += &m;
        }
        layer_norm(&x, &self.ln_final_w, &self.ln_final_b)
    }
}

impl ImageEncoder for VitEncoder {
    fn dim(&self) -> usize {
        self.config.hidden
    }

    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn channel_mean(&self) -> [f64; 3] {
        self.mean
    }

    fn channel_std(&self) -> [f64; 3] {
        self.std
    }

    fn encode(&self, chw: &[Raster; 3]) -> Result<Vec<f64>> {
        for ch in chw {
            if ch.shape() != (self.config.image, self.config.image) {
                return Err(Error::InvalidConfig(format!(
                    "encoder expects {0}x{0} input, got {1:?}",
                    self.config.image,
                    ch.shape()
                )));
            }
        }
        let x = self.forward(chw);
        Ok(match self.config.pool {
            Pooling::Cls => x.row(0).to_vec(),
            Pooling::Mean => {
                let body = x.slice(ndarray::s![1.., ..]);
                body.mean_axis(Axis(0)).unwrap().to_vec()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::embed::embed_rgb;

    fn tiny_config() -> VitConfig {
        VitConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            mlp_dim: 32,
            patch: 16,
            image: 224,
            pool: Pooling::Cls,
        }
    }

    #[test]
    fn save_load_round_trip_preserves_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.vitw");
        let enc = VitEncoder::synthetic(tiny_config(), 3).unwrap();
        enc.save(&path).unwrap();
        let loaded = VitEncoder::load(&path).unwrap();

        let band = Raster::from_vec(64, 64, (0..4096).map(|i| f64::from(i % 211)).collect());
        let a = embed_rgb(&[&band, &band, &band], &enc).unwrap();
        let b = embed_rgb(&[&band, &band, &band], &loaded).unwrap();
        assert_eq!(a.len(), 16);
        // The file stores f32, so allow the one-time quantization error.
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn loaded_encoder_is_deterministic_and_input_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.vitw");
        VitEncoder::synthetic(tiny_config(), 5).unwrap().save(&path).unwrap();
        let enc = VitEncoder::load(&path).unwrap();

        let a = Raster::from_vec(32, 32, (0..1024).map(|i| f64::from(i % 130)).collect());
        let b = Raster::from_vec(32, 32, vec![500.0; 1024]);
        let ea1 = embed_rgb(&[&a, &a, &a], &enc).unwrap();
        let ea2 = embed_rgb(&[&a, &a, &a], &enc).unwrap();
        let eb = embed_rgb(&[&b, &b, &b], &enc).unwrap();
        assert_eq!(ea1, ea2);
        assert_ne!(ea1, eb);
    }

    #[test]
    fn missing_weights_file_is_a_startup_error() {
        let err = VitEncoder::load(Path::new("/nonexistent/weights.vitw")).unwrap_err();
        assert!(matches!(err, Error::EncoderWeights(_)));
    }

    #[test]
    fn mean_pooling_differs_from_cls() {
        let mut cfg = tiny_config();
        let enc_cls = VitEncoder::synthetic(cfg.clone(), 7).unwrap();
        cfg.pool = Pooling::Mean;
        let enc_mean = VitEncoder::synthetic(cfg, 7).unwrap();
        let band = Raster::from_vec(16, 16, (0..256).map(f64::from).collect());
        let a = embed_rgb(&[&band, &band, &band], &enc_cls).unwrap();
        let b = embed_rgb(&[&band, &band, &band], &enc_mean).unwrap();
        assert_ne!(a, b);
    }
}
