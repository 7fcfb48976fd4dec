//! Scene store: one multiband TIFF per (region, epi week), 12 bands in the
//! fixed storage order as 16-bit unsigned reflectance, one image directory
//! per band so bands keep their native shapes.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::ingestion::{BandSpec, SatelliteScene, SceneBand};
use crate::raster::Raster;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct SceneStore {
    root: PathBuf,
}

impl SceneStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SceneStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, region: &str, week: EpiWeek) -> PathBuf {
        self.root.join(region).join(format!("{week}.tiff"))
    }

    pub fn exists(&self, region: &str, week: EpiWeek) -> bool {
        self.path_for(region, week).is_file()
    }

    /// Writes via a unique temp file and an atomic rename, so concurrent
    /// writers of distinct keys never see partial files.
    pub fn save(&self, scene: &SatelliteScene) -> Result<PathBuf> {
        let path = self.path_for(&scene.region, scene.epiweek);
        let dir = path.parent().expect("store paths have parents");
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;

        let bytes = encode_scene(scene)?;
        let tmp = dir.join(format!(
            ".{}.tmp.{}.{}",
            scene.epiweek,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, bytes).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))?;
        Ok(path)
    }

    /// Loads a scene, attaching names and native resolutions from the band
    /// table (the file stores pixel data only).
    pub fn load(
        &self,
        region: &str,
        week: EpiWeek,
        band_specs: &[BandSpec],
    ) -> Result<SatelliteScene> {
        let path = self.path_for(region, week);
        if !path.is_file() {
            return Err(Error::MissingScene { region: region.to_string(), week });
        }
        load_scene_file(&path, region, week, band_specs)
    }

    /// Weeks present for a region, ascending.
    pub fn list_weeks(&self, region: &str) -> Result<Vec<EpiWeek>> {
        let dir = self.root.join(region);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut weeks = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(format!("read {}", dir.display()), e))? {
            let entry = entry.map_err(|e| Error::io("read dir entry".to_string(), e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".tiff") {
                if let Ok(week) = stem.parse::<EpiWeek>() {
                    weeks.push(week);
                }
            }
        }
        weeks.sort_unstable();
        Ok(weeks)
    }
}

fn encode_scene(scene: &SatelliteScene) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    {
        let mut encoder = TiffEncoder::new(BufWriter::new(&mut buf))
            .map_err(|e| Error::tiff("encoder init", e))?;
        for band in &scene.bands {
            let (h, w) = band.raster.shape();
            let mut data = Vec::with_capacity(h * w);
            for &v in band.raster.as_slice() {
                if !v.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "band {} has non-finite reflectance",
                        band.name
                    )));
                }
                data.push(v.round().clamp(0.0, 65535.0) as u16);
            }
            encoder
                .write_image::<colortype::Gray16>(w as u32, h as u32, &data)
                .map_err(|e| Error::tiff(format!("write band {}", band.name), e))?;
        }
    }
    Ok(buf.into_inner())
}

pub(crate) fn load_scene_file(
    path: &Path,
    region: &str,
    week: EpiWeek,
    band_specs: &[BandSpec],
) -> Result<SatelliteScene> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut decoder = Decoder::new(std::io::BufReader::new(file))
        .map_err(|e| Error::tiff(format!("open {}", path.display()), e))?;

    let mut bands = Vec::with_capacity(band_specs.len());
    for (i, spec) in band_specs.iter().enumerate() {
        let (w, h) = decoder
            .dimensions()
            .map_err(|e| Error::tiff(format!("band {} dimensions", spec.name), e))?;
        let data = match decoder
            .read_image()
            .map_err(|e| Error::tiff(format!("band {} data", spec.name), e))?
        {
            DecodingResult::U16(v) => v.into_iter().map(f64::from).collect::<Vec<_>>(),
            DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::F64(v) => v,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "band {} has unsupported sample format {:?}",
                    spec.name,
                    std::mem::discriminant(&other)
                )))
            }
        };
        bands.push(SceneBand {
            name: spec.name.clone(),
            mpp: spec.native_mpp,
            raster: Raster::from_vec(h as usize, w as usize, data),
        });
        let expect_more = i + 1 < band_specs.len();
        if expect_more {
            if !decoder.more_images() {
                return Err(Error::InvalidConfig(format!(
                    "{} holds {} bands, expected {}",
                    path.display(),
                    i + 1,
                    band_specs.len()
                )));
            }
            decoder
                .next_image()
                .map_err(|e| Error::tiff("advance to next band".to_string(), e))?;
        }
    }
    Ok(SatelliteScene { region: region.to_string(), epiweek: week, bands })
}

/// Writes cleaned (floating-point) band rasters as an f32 multiband TIFF.
pub fn save_float_bands(path: &Path, bands: &[(String, Raster)]) -> Result<()> {
    let dir = path.parent().expect("paths have parents");
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let mut buf = Cursor::new(Vec::new());
    {
        let mut encoder = TiffEncoder::new(BufWriter::new(&mut buf))
            .map_err(|e| Error::tiff("encoder init", e))?;
        for (name, raster) in bands {
            let (h, w) = raster.shape();
            let data: Vec<f32> = raster.as_slice().iter().map(|&v| v as f32).collect();
            encoder
                .write_image::<colortype::Gray32Float>(w as u32, h as u32, &data)
                .map_err(|e| Error::tiff(format!("write band {name}"), e))?;
        }
    }
    fs::write(path, buf.into_inner()).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Loads an f32 multiband TIFF written by [`save_float_bands`].
pub fn load_float_bands(path: &Path, names: &[String]) -> Result<Vec<(String, Raster)>> {
    let specs: Vec<BandSpec> = names
        .iter()
        .map(|n| BandSpec { name: n.clone(), native_mpp: 10 })
        .collect();
    let week = EpiWeek::new(2000, 1).expect("constant week");
    let scene = load_scene_file(path, "", week, &specs)?;
    Ok(scene.bands.into_iter().map(|b| (b.name, b.raster)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_specs() -> Vec<BandSpec> {
        vec![
            BandSpec { name: "B04".into(), native_mpp: 10 },
            BandSpec { name: "B11".into(), native_mpp: 20 },
        ]
    }

    fn sample_scene() -> SatelliteScene {
        SatelliteScene {
            region: "Cali".into(),
            epiweek: EpiWeek::new(2017, 10).unwrap(),
            bands: vec![
                SceneBand {
                    name: "B04".into(),
                    mpp: 10,
                    raster: Raster::from_vec(4, 4, (0..16).map(f64::from).collect()),
                },
                SceneBand {
                    name: "B11".into(),
                    mpp: 20,
                    raster: Raster::from_vec(2, 2, vec![100.0, 200.0, 300.0, 65535.0]),
                },
            ],
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SceneStore::new(dir.path());
        let scene = sample_scene();
        let path = store.save(&scene).unwrap();
        assert!(path.ends_with("Cali/2017-W10.tiff"));
        let loaded = store.load("Cali", scene.epiweek, &band_specs()).unwrap();
        assert_eq!(loaded, scene);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let scene = sample_scene();
        assert_eq!(encode_scene(&scene).unwrap(), encode_scene(&scene).unwrap());
    }

    #[test]
    fn missing_scene_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = SceneStore::new(dir.path());
        let err = store.load("Cali", EpiWeek::new(2017, 11).unwrap(), &band_specs()).unwrap_err();
        assert!(matches!(err, Error::MissingScene { .. }));
    }

    #[test]
    fn list_weeks_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let store = SceneStore::new(dir.path());
        let mut scene = sample_scene();
        for w in [5u32, 2, 9] {
            scene.epiweek = EpiWeek::new(2018, w).unwrap();
            store.save(&scene).unwrap();
        }
        let weeks = store.list_weeks("Cali").unwrap();
        assert_eq!(
            weeks,
            vec![
                EpiWeek::new(2018, 2).unwrap(),
                EpiWeek::new(2018, 5).unwrap(),
                EpiWeek::new(2018, 9).unwrap()
            ]
        );
        assert!(store.list_weeks("Nowhere").unwrap().is_empty());
    }

    #[test]
    fn concurrent_writers_of_distinct_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = SceneStore::new(dir.path());
        std::thread::scope(|s| {
            for w in 1..=8u32 {
                let store = &store;
                s.spawn(move || {
                    let mut scene = sample_scene();
                    scene.epiweek = EpiWeek::new(2018, w).unwrap();
                    store.save(&scene).unwrap();
                });
            }
        });
        let weeks = store.list_weeks("Cali").unwrap();
        assert_eq!(weeks.len(), 8);
        for week in weeks {
            store.load("Cali", week, &band_specs()).unwrap();
        }
    }

    #[test]
    fn float_bands_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clean.tiff");
        let bands = vec![
            ("B12".to_string(), Raster::from_vec(2, 3, vec![0.5, 1.25, -3.0, 8.0, 9.5, 100.25])),
        ];
        save_float_bands(&path, &bands).unwrap();
        let loaded = load_float_bands(&path, &["B12".to_string()]).unwrap();
        assert_eq!(loaded[0].0, "B12");
        assert_eq!(loaded[0].1, bands[0].1);
    }
}
