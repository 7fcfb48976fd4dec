//! Scene and case ingestion: fetch per-epi-week 12-band scenes, store them,
//! load weekly case counts, and align both into one chronological series per
//! municipality.

pub mod cases;
pub mod provider;
pub mod store;

pub use cases::load_cases;
pub use provider::{fetch_scene, FixtureProvider, SceneProvider, SentinelHubProvider};
pub use store::SceneStore;

use serde::{Deserialize, Serialize};

use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// WGS84 bounding box; latitudes and longitudes in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        if self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::InvalidConfig(format!(
                "bounding box must have lat_min < lat_max and lon_min < lon_max, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MunicipalityRegion {
    pub name: String,
    pub bbox: BoundingBox,
}

impl MunicipalityRegion {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidRegion {
                name: self.name.clone(),
                reason: "empty name".to_string(),
            });
        }
        self.bbox.validate()
    }
}

/// Name and native resolution of one stored band, in storage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub native_mpp: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBand {
    pub name: String,
    pub mpp: u32,
    pub raster: Raster,
}

/// One municipality/epi-week observation: co-registered single-channel
/// rasters in the fixed storage band order.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteScene {
    pub region: String,
    pub epiweek: EpiWeek,
    pub bands: Vec<SceneBand>,
}

impl SatelliteScene {
    /// Resolution shared by every band, when bands agree on both meters per
    /// pixel and raster shape.
    pub fn uniform_mpp(&self) -> Option<u32> {
        let first = self.bands.first()?;
        let shape = first.raster.shape();
        self.bands
            .iter()
            .all(|b| b.mpp == first.mpp && b.raster.shape() == shape)
            .then_some(first.mpp)
    }

    /// Band by 1-based storage position.
    pub fn band(&self, index1: usize) -> &SceneBand {
        &self.bands[index1 - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub region: String,
    pub epiweek: EpiWeek,
    pub cases: u32,
}

#[derive(Debug)]
pub struct AlignedEntry {
    pub epiweek: EpiWeek,
    pub scene: SatelliteScene,
    pub cases: u32,
}

/// Strictly consecutive weeks for which both a scene and a case record exist.
#[derive(Debug)]
pub struct AlignedSeries {
    pub region: String,
    pub entries: Vec<AlignedEntry>,
}

#[derive(Debug)]
pub struct Aligned {
    pub series: AlignedSeries,
    /// Weeks inside the overlap span that did not make the contiguous run.
    pub excluded: Vec<EpiWeek>,
}

/// Nearest-neighbor upscales every band to `target_mpp`, then center-crops
/// all bands to the common minimum shape so they are co-registered.
/// Idempotent when the scene is already uniform at the target resolution.
pub fn resample_to_uniform(scene: &SatelliteScene, target_mpp: u32) -> Result<SatelliteScene> {
    let mut bands = Vec::with_capacity(scene.bands.len());
    for band in &scene.bands {
        if band.mpp % target_mpp != 0 {
            return Err(Error::NonIntegerScale {
                band: band.name.clone(),
                native_mpp: band.mpp,
                target_mpp,
            });
        }
        let factor = (band.mpp / target_mpp) as usize;
        bands.push(SceneBand {
            name: band.name.clone(),
            mpp: target_mpp,
            raster: band.raster.upscale_nearest(factor),
        });
    }
    let min_h = bands.iter().map(|b| b.raster.height()).min().unwrap_or(0);
    let min_w = bands.iter().map(|b| b.raster.width()).min().unwrap_or(0);
    for band in &mut bands {
        band.raster = band.raster.center_crop(min_h, min_w);
    }
    Ok(SatelliteScene { region: scene.region.clone(), epiweek: scene.epiweek, bands })
}

/// Intersects scenes and cases on epi weeks and returns the longest
/// contiguous run (the earliest on ties), reporting every other week inside
/// the overlap span.
pub fn align(
    scenes: Vec<SatelliteScene>,
    cases: &[CaseRecord],
    region: &str,
) -> Result<Aligned> {
    use std::collections::BTreeMap;

    let mut scene_map: BTreeMap<EpiWeek, SatelliteScene> = BTreeMap::new();
    for s in scenes.into_iter().filter(|s| s.region == region) {
        scene_map.insert(s.epiweek, s);
    }
    let case_map: BTreeMap<EpiWeek, u32> = cases
        .iter()
        .filter(|c| c.region == region)
        .map(|c| (c.epiweek, c.cases))
        .collect();

    let both: Vec<EpiWeek> = scene_map
        .keys()
        .filter(|w| case_map.contains_key(w))
        .copied()
        .collect();
    if both.is_empty() {
        return Err(Error::EmptyOverlap(region.to_string()));
    }

    // Longest run of consecutive weeks; earliest wins ties.
    let mut best: (usize, usize) = (0, 1); // (start index, length)
    let mut run_start = 0usize;
    for i in 1..=both.len() {
        let broken = i == both.len() || both[i - 1].succ() != both[i];
        if broken {
            let len = i - run_start;
            if len > best.1 {
                best = (run_start, len);
            }
            run_start = i;
        }
    }
    if best.1 == 0 {
        best = (0, 1);
    }
    let chosen: Vec<EpiWeek> = both[best.0..best.0 + best.1].to_vec();

    let span_first = both[0];
    let span_last = both[both.len() - 1];
    let excluded: Vec<EpiWeek> = span_first
        .range_through(span_last)
        .filter(|w| !chosen.contains(w))
        .collect();

    let entries = chosen
        .into_iter()
        .map(|w| AlignedEntry {
            epiweek: w,
            scene: scene_map.remove(&w).expect("chosen week has a scene"),
            cases: case_map[&w],
        })
        .collect();

    Ok(Aligned {
        series: AlignedSeries { region: region.to_string(), entries },
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(region: &str, week: EpiWeek, bands: Vec<(u32, usize, usize)>) -> SatelliteScene {
        SatelliteScene {
            region: region.to_string(),
            epiweek: week,
            bands: bands
                .into_iter()
                .enumerate()
                .map(|(i, (mpp, h, w))| SceneBand {
                    name: format!("B{:02}", i + 1),
                    mpp,
                    raster: Raster::from_vec(h, w, (0..h * w).map(|p| (p % 997) as f64).collect()),
                })
                .collect(),
        }
    }

    fn wk(year: i32, week: u32) -> EpiWeek {
        EpiWeek::new(year, week).unwrap()
    }

    #[test]
    fn resample_upscales_and_harmonizes() {
        let s = scene("Cali", wk(2017, 10), vec![(10, 736, 736), (20, 368, 368), (60, 123, 123)]);
        let out = resample_to_uniform(&s, 10).unwrap();
        assert_eq!(out.uniform_mpp(), Some(10));
        // The 60 m band becomes 738x738 before the common center-crop to 736.
        for b in &out.bands {
            assert_eq!(b.raster.shape(), (736, 736));
        }
    }

    #[test]
    fn resample_is_identity_when_uniform() {
        let s = scene("Cali", wk(2017, 10), vec![(10, 64, 64), (10, 64, 64)]);
        let out = resample_to_uniform(&s, 10).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn sixty_meter_band_matches_nearest_index_oracle() {
        let s = scene("Cali", wk(2017, 10), vec![(60, 123, 123)]);
        let out = resample_to_uniform(&s, 10).unwrap();
        let up = &out.bands[0].raster;
        assert_eq!(up.shape(), (738, 738));
        let src = &s.bands[0].raster;
        // Brute-force nearest-source-index: minimize the distance between
        // pixel centers.
        let nearest = |o: usize| -> usize {
            let target = (o as f64 + 0.5) / 6.0;
            (0..123)
                .min_by(|&a, &b| {
                    let da = ((a as f64 + 0.5) - target).abs();
                    let db = ((b as f64 + 0.5) - target).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
        };
        for r in 0..738 {
            for c in 0..738 {
                assert_eq!(up.get(r, c), src.get(nearest(r), nearest(c)));
            }
        }
    }

    #[test]
    fn resample_rejects_non_integer_factors() {
        let s = scene("Cali", wk(2017, 10), vec![(25, 10, 10)]);
        assert!(matches!(
            resample_to_uniform(&s, 10),
            Err(Error::NonIntegerScale { .. })
        ));
    }

    #[test]
    fn resample_preserves_value_multiset() {
        let s = scene("Cali", wk(2017, 10), vec![(30, 17, 13)]);
        let out = resample_to_uniform(&s, 10).unwrap();
        let mut src: Vec<u64> = s.bands[0].raster.as_slice().iter().map(|v| v.to_bits()).collect();
        src.sort_unstable();
        src.dedup();
        for v in out.bands[0].raster.as_slice() {
            assert!(src.binary_search(&v.to_bits()).is_ok(), "value invented by resampling");
        }
    }

    fn case(region: &str, week: EpiWeek, n: u32) -> CaseRecord {
        CaseRecord { region: region.to_string(), epiweek: week, cases: n }
    }

    #[test]
    fn align_intersects_week_ranges() {
        let scenes: Vec<_> = (1..=10).map(|w| scene("Cali", wk(2017, w), vec![(10, 4, 4)])).collect();
        let cases: Vec<_> = (3..=12).map(|w| case("Cali", wk(2017, w), w)).collect();
        let out = align(scenes, &cases, "Cali").unwrap();
        let weeks: Vec<_> = out.series.entries.iter().map(|e| e.epiweek).collect();
        assert_eq!(weeks, (3..=10).map(|w| wk(2017, w)).collect::<Vec<_>>());
        assert!(out.excluded.is_empty());
    }

    #[test]
    fn align_takes_longest_run_and_reports_gap() {
        let scenes: Vec<_> = (1..=10)
            .filter(|&w| w != 5)
            .map(|w| scene("Cali", wk(2017, w), vec![(10, 4, 4)]))
            .collect();
        let cases: Vec<_> = (1..=10).map(|w| case("Cali", wk(2017, w), w)).collect();
        let out = align(scenes, &cases, "Cali").unwrap();
        let weeks: Vec<_> = out.series.entries.iter().map(|e| e.epiweek).collect();
        // Runs are W1..W4 (4) and W6..W10 (5): the longer one wins.
        assert_eq!(weeks, (6..=10).map(|w| wk(2017, w)).collect::<Vec<_>>());
        assert_eq!(out.excluded, (1..=5).map(|w| wk(2017, w)).collect::<Vec<_>>());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn align_matches_bruteforce_run_scan_on_random_gaps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let present: Vec<u32> = (1..=30).filter(|_| rng.random_bool(0.8)).collect();
            if present.is_empty() {
                continue;
            }
            let scenes: Vec<_> = present
                .iter()
                .map(|&w| scene("X", wk(2018, w), vec![(10, 2, 2)]))
                .collect();
            let cases: Vec<_> = (1..=30).map(|w| case("X", wk(2018, w), 1)).collect();
            let out = align(scenes, &cases, "X").unwrap();

            // Brute force: enumerate all contiguous runs over present weeks.
            let mut best: Vec<u32> = Vec::new();
            for i in 0..present.len() {
                let mut run = vec![present[i]];
                for j in i + 1..present.len() {
                    if present[j] == run.last().unwrap() + 1 {
                        run.push(present[j]);
                    } else {
                        break;
                    }
                }
                if run.len() > best.len() {
                    best = run;
                }
            }
            let got: Vec<u32> = out.series.entries.iter().map(|e| e.epiweek.week() as u32).collect();
            assert_eq!(got, best);
            // Consecutive check.
            for pair in out.series.entries.windows(2) {
                assert_eq!(pair[0].epiweek.succ(), pair[1].epiweek);
            }
        }
    }

    #[test]
    fn align_disjoint_ranges_error() {
        let scenes = vec![scene("Cali", wk(2017, 1), vec![(10, 2, 2)])];
        let cases = vec![case("Cali", wk(2017, 9), 3)];
        assert!(matches!(align(scenes, &cases, "Cali"), Err(Error::EmptyOverlap(_))));
    }
}
