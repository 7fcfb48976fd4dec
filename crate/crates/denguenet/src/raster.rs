//! Single-band raster grid, row-major f64.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Raster { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "raster data does not match shape");
        Raster { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < min {
                min = v;
            }
            if v > max {
                max = v;
            }
        }
        (min, max)
    }

    /// Nearest-neighbor upscale by an integer factor: every source pixel
    /// becomes a `factor`x`factor` block. No value is invented.
    pub fn upscale_nearest(&self, factor: usize) -> Raster {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            let src_row = self.row(r / factor);
            for c in 0..w {
                out.push(src_row[c / factor]);
            }
        }
        Raster::from_vec(h, w, out)
    }

    /// Crop to `(out_h, out_w)` keeping the center. Offsets round down when
    /// the margin is odd so tile positions stay comparable across scenes.
    pub fn center_crop(&self, out_h: usize, out_w: usize) -> Raster {
        assert!(out_h <= self.height && out_w <= self.width, "crop larger than raster");
        if (out_h, out_w) == (self.height, self.width) {
            return self.clone();
        }
        let r0 = (self.height - out_h) / 2;
        let c0 = (self.width - out_w) / 2;
        let mut out = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            out.extend_from_slice(&self.row(r0 + r)[c0..c0 + out_w]);
        }
        Raster::from_vec(out_h, out_w, out)
    }

    /// Bilinear resize to `(out_h, out_w)` with pixel-center alignment.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Raster {
        assert!(out_h > 0 && out_w > 0);
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut out = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for c in 0..out_w {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - wx) + self.get(y0, x1) * wx;
                let bot = self.get(y1, x0) * (1.0 - wx) + self.get(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
        Raster::from_vec(out_h, out_w, out)
    }

    /// Checks every value is finite; used at ingest boundaries.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{what} contains non-finite values")))
        }
    }
}
