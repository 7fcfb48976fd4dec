//! Cloud and cloud-shadow removal.
//!
//! Percentile thresholds fit on training pixels flag cloudy (bright) and
//! shadowed (dark) pixels; rasters are sliced into 16x16 tiles, tiles with
//! more than half their pixels flagged are abnormal, and abnormal tiles are
//! swapped with the per-position average of normal tiles across the
//! training scenes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const TILE_SIZE: usize = 16;
const TILE_AREA: usize = TILE_SIZE * TILE_SIZE;

/// Pixel-value thresholds: at or above `cloud` is cloud, at or below
/// `shadow` is shadow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcsThresholds {
    pub cloud: f64,
    pub shadow: f64,
    pub p_cloud: u32,
    pub p_shadow: u32,
}

#[derive(Debug, Clone)]
pub struct NoiseMask {
    height: usize,
    width: usize,
    pub cloud: Vec<bool>,
    pub shadow: Vec<bool>,
}

impl NoiseMask {
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn flagged(&self, idx: usize) -> bool {
        self.cloud[idx] || self.shadow[idx]
    }

    pub fn cloud_count(&self) -> usize {
        self.cloud.iter().filter(|&&b| b).count()
    }

    pub fn shadow_count(&self) -> usize {
        self.shadow.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileLabel {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone)]
pub struct TileGrid {
    rows: usize,
    cols: usize,
    labels: Vec<TileLabel>,
}

impl TileGrid {
    pub fn grid_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn label(&self, r: usize, c: usize) -> TileLabel {
        self.labels[r * self.cols + c]
    }

    pub fn abnormal_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == TileLabel::Abnormal).count()
    }

    pub fn abnormal_positions(&self) -> Vec<(usize, usize)> {
        (0..self.rows * self.cols)
            .filter(|i| self.labels[*i] == TileLabel::Abnormal)
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }
}

/// Per-position mean of normal tiles across the training scenes.
#[derive(Debug, Clone)]
pub struct AverageTileBank {
    rows: usize,
    cols: usize,
    tiles: Vec<Option<Vec<f64>>>,
    counts: Vec<u32>,
}

impl AverageTileBank {
    pub fn grid_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn tile(&self, r: usize, c: usize) -> Option<&[f64]> {
        self.tiles[r * self.cols + c].as_deref()
    }

    pub fn normal_count(&self, r: usize, c: usize) -> u32 {
        self.counts[r * self.cols + c]
    }
}

#[derive(Debug, Clone)]
pub struct SwapOutcome {
    pub raster: Raster,
    /// Positions overwritten with the bank average.
    pub swapped: Vec<(usize, usize)>,
    /// Abnormal positions with no bank entry, left unchanged.
    pub unswappable: Vec<(usize, usize)>,
}

fn validate_percentile(p: u32) -> Result<()> {
    if !(5..=95).contains(&p) || !p.is_multiple_of(5) {
        return Err(Error::InvalidConfig(format!(
            "percentile {p} must be one of 5, 10, ..., 95"
        )));
    }
    Ok(())
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pools every pixel of the training rasters and takes the cloud/shadow
/// percentiles by linear interpolation between order statistics.
pub fn fit_thresholds(
    training_band_rasters: &[Raster],
    p_cloud: u32,
    p_shadow: u32,
) -> Result<CcsThresholds> {
    validate_percentile(p_cloud)?;
    validate_percentile(p_shadow)?;
    if p_shadow >= p_cloud {
        return Err(Error::InvalidConfig(format!(
            "shadow percentile {p_shadow} must be below cloud percentile {p_cloud}"
        )));
    }
    if training_band_rasters.is_empty() {
        return Err(Error::TooFewScenes { need: 1, got: 0 });
    }
    let mut pooled: Vec<f64> = training_band_rasters
        .iter()
        .flat_map(|r| r.as_slice().iter().copied())
        .collect();
    pooled.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite pixel"));

    let cloud = percentile_sorted(&pooled, p_cloud as f64);
    let shadow = percentile_sorted(&pooled, p_shadow as f64);
    if shadow >= cloud {
        return Err(Error::DegenerateThresholds { cloud, shadow });
    }
    Ok(CcsThresholds { cloud, shadow, p_cloud, p_shadow })
}

/// Marks cloud pixels (value >= cloud threshold) and shadow pixels
/// (value <= shadow threshold). Boundaries are inclusive.
pub fn detect_ccs(band: &Raster, thresholds: &CcsThresholds) -> NoiseMask {
    let data = band.as_slice();
    let cloud = data.iter().map(|&v| v >= thresholds.cloud).collect();
    let shadow = data.iter().map(|&v| v <= thresholds.shadow).collect();
    NoiseMask { height: band.height(), width: band.width(), cloud, shadow }
}

/// Center-crops to the largest 16-multiple so tile positions are comparable
/// across scenes.
pub fn crop_to_tile_multiple(band: &Raster) -> Raster {
    let h = band.height() / TILE_SIZE * TILE_SIZE;
    let w = band.width() / TILE_SIZE * TILE_SIZE;
    assert!(h > 0 && w > 0, "raster smaller than one tile");
    band.center_crop(h, w)
}

/// Labels a tile abnormal when strictly more than half of its pixels are
/// flagged in either mask.
pub fn classify_tiles(band: &Raster, mask: &NoiseMask) -> TileGrid {
    assert_eq!(band.shape(), mask.shape(), "mask must match band");
    let (h, w) = band.shape();
    assert!(
        h % TILE_SIZE == 0 && w % TILE_SIZE == 0,
        "raster {h}x{w} not a tile multiple; apply crop_to_tile_multiple first"
    );
    let (rows, cols) = (h / TILE_SIZE, w / TILE_SIZE);
    let mut labels = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let mut flagged = 0usize;
            for dr in 0..TILE_SIZE {
                let base = (tr * TILE_SIZE + dr) * w + tc * TILE_SIZE;
                for dc in 0..TILE_SIZE {
                    if mask.flagged(base + dc) {
                        flagged += 1;
                    }
                }
            }
            labels.push(if flagged > TILE_AREA / 2 { TileLabel::Abnormal } else { TileLabel::Normal });
        }
    }
    TileGrid { rows, cols, labels }
}

/// Averages, position by position, the tiles classified normal across the
/// training scenes. Positions that are abnormal in every scene get no entry.
pub fn build_average_bank(
    training_scenes_band: &[Raster],
    thresholds: &CcsThresholds,
) -> Result<AverageTileBank> {
    let first = training_scenes_band.first().ok_or(Error::TooFewScenes { need: 1, got: 0 })?;
    let shape = first.shape();
    for r in training_scenes_band {
        if r.shape() != shape {
            return Err(Error::InvalidConfig(format!(
                "average bank needs equally shaped rasters, got {:?} and {:?}",
                shape,
                r.shape()
            )));
        }
    }
    let (rows, cols) = (shape.0 / TILE_SIZE, shape.1 / TILE_SIZE);
    let mut sums = vec![vec![0.0f64; TILE_AREA]; rows * cols];
    let mut counts = vec![0u32; rows * cols];

    for band in training_scenes_band {
        let grid = classify_tiles(band, &detect_ccs(band, thresholds));
        for tr in 0..rows {
            for tc in 0..cols {
                if grid.label(tr, tc) != TileLabel::Normal {
                    continue;
                }
                let sum = &mut sums[tr * cols + tc];
                for dr in 0..TILE_SIZE {
                    for dc in 0..TILE_SIZE {
                        sum[dr * TILE_SIZE + dc] += band.get(tr * TILE_SIZE + dr, tc * TILE_SIZE + dc);
                    }
                }
                counts[tr * cols + tc] += 1;
            }
        }
    }

    let tiles = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &n)| {
            if n == 0 {
                None
            } else {
                Some(sum.into_iter().map(|s| s / n as f64).collect())
            }
        })
        .collect();
    Ok(AverageTileBank { rows, cols, tiles, counts })
}

/// Overwrites abnormal tiles with the bank's average tile at the same
/// position; abnormal tiles without a bank entry stay untouched and are
/// reported.
pub fn swap_tiles(band: &Raster, grid: &TileGrid, bank: &AverageTileBank) -> SwapOutcome {
    assert_eq!(grid.grid_shape(), bank.grid_shape(), "grid and bank disagree on tiling");
    let mut out = band.clone();
    let mut swapped = Vec::new();
    let mut unswappable = Vec::new();
    for (tr, tc) in grid.abnormal_positions() {
        match bank.tile(tr, tc) {
            Some(avg) => {
                for dr in 0..TILE_SIZE {
                    for dc in 0..TILE_SIZE {
                        out.set(tr * TILE_SIZE + dr, tc * TILE_SIZE + dc, avg[dr * TILE_SIZE + dc]);
                    }
                }
                swapped.push((tr, tc));
            }
            None => unswappable.push((tr, tc)),
        }
    }
    SwapOutcome { raster: out, swapped, unswappable }
}
