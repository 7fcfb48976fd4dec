//! Deterministic synthetic fixture: procedurally generated 12-band scenes
//! with planted clouds and shadows, and a weekly case series coupled
//! linearly to the texture signal of the SWIR band.
//!
//! The planted signal follows a sinusoid, so next week's value is a linear
//! function of the previous two and a window of recent weeks carries
//! everything needed for the forecast. Case noise is small enough that the
//! irreducible MAE sits far below the acceptance bars.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::ingestion::{BandSpec, SatelliteScene, SceneBand, SceneStore};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Side length of the 10 m/px bands; 20 m bands are half, 60 m a sixth.
    pub base_size: usize,
    /// Probability that a week gets planted cloud and shadow tiles.
    pub cloud_week_prob: f64,
    /// Sinusoid period in weeks.
    pub period: f64,
    /// Case-count noise standard deviation.
    pub case_noise_sd: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            base_size: 128,
            cloud_week_prob: 0.3,
            period: 13.0,
            case_noise_sd: 1.5,
        }
    }
}

/// Smooth pseudo-random field in [0, 1]: a sum of low-frequency cosines.
struct TerrainField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl TerrainField {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        TerrainField { waves }
    }

    /// Sampled at normalized coordinates in [0, 1].
    fn at(&self, x: f64, y: f64) -> f64 {
        let raw: f64 = self
            .waves
            .iter()
            .map(|&(u, v, phase, amp)| amp * (TAU * (u * x + v * y) + phase).cos())
            .sum();
        // Waves sum to at most ~4 in magnitude; squash into [0, 1].
        (raw / 4.0 + 1.0) / 2.0
    }
}

fn stable_region_stream(seed: u64, region_index: usize, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (region_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose,
    )
}

/// Generates scenes and a case CSV under `fixture_dir` for every region
/// name, covering `start..=end`. Identical inputs give byte-identical
/// fixtures.
pub fn generate_fixture(
    fixture_dir: &Path,
    regions: &[String],
    bands: &[BandSpec],
    start: EpiWeek,
    end: EpiWeek,
    spec: &SynthSpec,
) -> Result<SynthReport> {
    if regions.is_empty() {
        return Err(Error::InvalidConfig("synth needs at least one region".to_string()));
    }
    if !spec.base_size.is_multiple_of(16) {
        return Err(Error::InvalidConfig("synth base_size must be a multiple of 16".to_string()));
    }
    let store = SceneStore::new(fixture_dir.join("scenes"));
    let weeks: Vec<EpiWeek> = start.range_through(end).collect();
    if weeks.is_empty() {
        return Err(Error::InvalidConfig(format!("empty week range {start}..{end}")));
    }

    let mut case_rows: Vec<(String, EpiWeek, u32)> = Vec::new();
    let mut scene_count = 0usize;

    for (ri, region) in regions.iter().enumerate() {
        // Two fixed fields per band; the signal morphs the spatial pattern
        // between them, which survives any per-scene rescaling downstream.
        let mut terrain_rng = stable_region_stream(spec.seed, ri, 1);
        let terrain: Vec<(TerrainField, TerrainField)> = bands
            .iter()
            .map(|_| (TerrainField::new(&mut terrain_rng), TerrainField::new(&mut terrain_rng)))
            .collect();
        // Per-band base level and additive signal coupling. SWIR and
        // visible bands carry the planted signal strongest.
        let mut level_rng = stable_region_stream(spec.seed, ri, 2);
        let band_base: Vec<f64> =
            bands.iter().map(|_| level_rng.random_range(1200.0..2600.0)).collect();
        let coupling: Vec<f64> = bands
            .iter()
            .map(|b| match b.name.as_str() {
                "B12" | "B11" => 400.0,
                "B02" | "B03" | "B04" => 250.0,
                _ => 120.0,
            })
            .collect();

        let phase = ri as f64 * 0.7;
        let base_cases = 120.0 + 60.0 * ri as f64;
        let case_amp = 45.0 + 10.0 * ri as f64;
        let mut case_rng = stable_region_stream(spec.seed, ri, 3);
        let case_noise = Normal::new(0.0, spec.case_noise_sd).expect("valid sd");

        for (ti, &week) in weeks.iter().enumerate() {
            let signal = (TAU * ti as f64 / spec.period + phase).sin();

            let mut px_rng = stable_region_stream(spec.seed, ri, 1000 + ti as u64);
            // Cloud plan for the week, defined on the 10 m 16-px tile grid
            // so every 10/20 m band sees the same geography.
            let tiles_per_side = spec.base_size / 16;
            let cloudy = px_rng.random_bool(spec.cloud_week_prob);
            let mut cloud_tiles: Vec<(usize, usize)> = Vec::new();
            let mut shadow_tiles: Vec<(usize, usize)> = Vec::new();
            if cloudy {
                for _ in 0..px_rng.random_range(1..=3usize) {
                    cloud_tiles.push((
                        px_rng.random_range(0..tiles_per_side),
                        px_rng.random_range(0..tiles_per_side),
                    ));
                }
                for _ in 0..px_rng.random_range(1..=2usize) {
                    shadow_tiles.push((
                        px_rng.random_range(0..tiles_per_side),
                        px_rng.random_range(0..tiles_per_side),
                    ));
                }
            }

            let mut scene_bands = Vec::with_capacity(bands.len());
            for (bi, band) in bands.iter().enumerate() {
                let factor = band.native_mpp / 10;
                let side = if band.native_mpp == 60 {
                    // Providers over-cover tall resolutions; round up.
                    spec.base_size.div_ceil(factor as usize)
                } else {
                    spec.base_size / factor as usize
                };
                let mut raster = Raster::zeros(side, side);
                // Pattern weight in [0.2, 0.8]: the scene's spatial texture
                // morphs with the signal.
                let mix = 0.5 + 0.3 * signal;
                for r in 0..side {
                    for c in 0..side {
                        let (x, y) = (c as f64 / side as f64, r as f64 / side as f64);
                        let t = (1.0 - mix) * terrain[bi].0.at(x, y) + mix * terrain[bi].1.at(x, y);
                        let noise = px_rng.random_range(-20.0..20.0);
                        let v = band_base[bi] * (0.8 + 0.4 * t) + coupling[bi] * signal + noise;
                        raster.set(r, c, v.clamp(1.0, 60000.0));
                    }
                }
                // Plant clouds/shadows on 10 m and 20 m bands where the 16-px
                // 10 m tiles map to whole native blocks.
                if factor == 1 || factor == 2 {
                    let block = 16 / factor as usize;
                    for &(tr, tc) in &cloud_tiles {
                        for dr in 0..block {
                            for dc in 0..block {
                                raster.set(tr * block + dr, tc * block + dc, 45000.0);
                            }
                        }
                    }
                    for &(tr, tc) in &shadow_tiles {
                        for dr in 0..block {
                            for dc in 0..block {
                                raster.set(tr * block + dr, tc * block + dc, 2.0);
                            }
                        }
                    }
                }
                scene_bands.push(SceneBand {
                    name: band.name.clone(),
                    mpp: band.native_mpp,
                    raster,
                });
            }
            store.save(&SatelliteScene {
                region: region.clone(),
                epiweek: week,
                bands: scene_bands,
            })?;
            scene_count += 1;

            let cases = (base_cases + case_amp * signal + case_noise.sample(&mut case_rng))
                .round()
                .max(0.0) as u32;
            case_rows.push((region.clone(), week, cases));
        }
    }

    let mut csv = String::from("region,year,epiweek,cases\n");
    for (region, week, cases) in &case_rows {
        csv.push_str(&format!("{},{},{},{}\n", region, week.year(), week.week(), cases));
    }
    let cases_path = fixture_dir.join("cases.csv");
    std::fs::write(&cases_path, csv)
        .map_err(|e| Error::io(format!("write {}", cases_path.display()), e))?;

    Ok(SynthReport { scenes: scene_count, weeks: weeks.len(), regions: regions.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthReport {
    pub scenes: usize,
    pub weeks: usize,
    pub regions: usize,
}
