//! Scene providers: the live Sentinel Hub Process API client and the
//! offline fixture directory that stands in for it.

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::json;
use tiff::decoder::{Decoder, DecodingResult};

use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::ingestion::store::SceneStore;
use crate::ingestion::{BandSpec, MunicipalityRegion, SatelliteScene, SceneBand};
use crate::raster::Raster;

pub trait SceneProvider: Send + Sync {
    /// Returns the least-cloud-cover scene acquired inside the epi week,
    /// bands at their native resolutions.
    fn fetch(&self, region: &MunicipalityRegion, week: EpiWeek) -> Result<SatelliteScene>;
}

/// Fetches a scene and persists it to the scene store before returning it.
pub fn fetch_scene(
    region: &MunicipalityRegion,
    week: EpiWeek,
    provider: &dyn SceneProvider,
    store: &SceneStore,
) -> Result<SatelliteScene> {
    let scene = provider.fetch(region, week)?;
    store.save(&scene)?;
    Ok(scene)
}

/// Offline provider backed by a directory in scene-store layout. Same
/// fixture directory, same bytes: fetches are pure file reads.
pub struct FixtureProvider {
    store: SceneStore,
    band_specs: Vec<BandSpec>,
}

impl FixtureProvider {
    pub fn new(root: impl Into<PathBuf>, band_specs: Vec<BandSpec>) -> Self {
        FixtureProvider { store: SceneStore::new(root), band_specs }
    }

    pub fn available_weeks(&self, region: &str) -> Result<Vec<EpiWeek>> {
        self.store.list_weeks(region)
    }
}

impl SceneProvider for FixtureProvider {
    fn fetch(&self, region: &MunicipalityRegion, week: EpiWeek) -> Result<SatelliteScene> {
        self.store.load(&region.name, week, &self.band_specs)
    }
}

#[derive(Debug, Clone)]
pub struct SentinelHubConfig {
    pub base_url: String,
    pub token_url: String,
    pub client_id: String,
    pub client_secret: String,
    pub collection: String,
    /// Minimum spacing between requests enforced by the provider-level
    /// rate limiter.
    pub min_request_interval: Duration,
}

impl Default for SentinelHubConfig {
    fn default() -> Self {
        SentinelHubConfig {
            base_url: "https://services.sentinel-hub.com/api/v1/process".to_string(),
            token_url: "https://services.sentinel-hub.com/auth/realms/main/protocol/openid-connect/token".to_string(),
            client_id: String::new(),
            client_secret: String::new(),
            collection: "sentinel-2-l2a".to_string(),
            min_request_interval: Duration::from_millis(250),
        }
    }
}

/// Process API client: one request per band at the band's native
/// resolution, time interval spanning the epi week, mosaicking order
/// `leastCC`.
pub struct SentinelHubProvider {
    config: SentinelHubConfig,
    band_specs: Vec<BandSpec>,
    agent: ureq::Agent,
    token: Mutex<Option<(String, Instant)>>,
    last_request: Mutex<Option<Instant>>,
}

impl SentinelHubProvider {
    pub fn new(config: SentinelHubConfig, band_specs: Vec<BandSpec>) -> Self {
        let agent = ureq::config::Config::builder()
            .http_status_as_error(false)
            .build()
            .new_agent();
        SentinelHubProvider {
            config,
            band_specs,
            agent,
            token: Mutex::new(None),
            last_request: Mutex::new(None),
        }
    }

    /// Builds the Process API request body for one band; exposed for tests.
    pub fn request_body(&self, region: &MunicipalityRegion, week: EpiWeek, band: &BandSpec) -> serde_json::Value {
        let b = &region.bbox;
        json!({
            "input": {
                "bounds": {
                    "bbox": [b.lon_min, b.lat_min, b.lon_max, b.lat_max],
                    "properties": {"crs": "http://www.opengis.net/def/crs/EPSG/0/4326"}
                },
                "data": [{
                    "type": self.config.collection,
                    "dataFilter": {
                        "timeRange": {
                            "from": format!("{}T00:00:00Z", week.start_date()),
                            "to": format!("{}T23:59:59Z", week.end_date())
                        },
                        "mosaickingOrder": "leastCC"
                    }
                }]
            },
            "output": {
                "resx": band.native_mpp,
                "resy": band.native_mpp,
                "responses": [{"identifier": "default", "format": {"type": "image/tiff"}}]
            },
            "evalscript": format!(
                "//VERSION=3\nfunction setup() {{ return {{ input: [{{bands: [\"{0}\"], units: \"DN\"}}], output: {{ bands: 1, sampleType: \"UINT16\" }} }}; }}\nfunction evaluatePixel(s) {{ return [s.{0}]; }}",
                band.name
            )
        })
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().expect("limiter lock");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.config.min_request_interval {
                std::thread::sleep(self.config.min_request_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn access_token(&self) -> Result<String> {
        let mut guard = self.token.lock().expect("token lock");
        if let Some((tok, fetched)) = guard.as_ref() {
            // Tokens last an hour; refresh well before.
            if fetched.elapsed() < Duration::from_secs(45 * 60) {
                return Ok(tok.clone());
            }
        }
        self.throttle();
        let mut resp = self
            .agent
            .post(&self.config.token_url)
            .send_form([
                ("grant_type", "client_credentials"),
                ("client_id", self.config.client_id.as_str()),
                ("client_secret", self.config.client_secret.as_str()),
            ])
            .map_err(|e| Error::Provider(format!("token request: {e}")))?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(Error::ProviderAuth(format!("token endpoint returned {status}")));
        }
        if status != 200 {
            return Err(Error::Provider(format!("token endpoint returned {status}")));
        }
        #[derive(serde::Deserialize)]
        struct Token {
            access_token: String,
        }
        let token: Token = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Provider(format!("token response: {e}")))?;
        *guard = Some((token.access_token.clone(), Instant::now()));
        Ok(token.access_token)
    }

    fn fetch_band(
        &self,
        region: &MunicipalityRegion,
        week: EpiWeek,
        band: &BandSpec,
    ) -> Result<Raster> {
        let token = self.access_token()?;
        self.throttle();
        let mut resp = self
            .agent
            .post(&self.config.base_url)
            .header("Authorization", format!("Bearer {token}"))
            .header("Accept", "image/tiff")
            .send_json(self.request_body(region, week, band))
            .map_err(|e| Error::Provider(format!("process request for {}: {e}", band.name)))?;
        let status = resp.status().as_u16();
        match status {
            200 => {}
            401 | 403 => return Err(Error::ProviderAuth(format!("process API returned {status}"))),
            429 => {
                let retry_after_secs = resp
                    .headers()
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.parse().ok());
                return Err(Error::ProviderRateLimited { retry_after_secs });
            }
            _ => return Err(Error::Provider(format!("process API returned {status}"))),
        }
        let bytes = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| Error::Provider(format!("reading band {}: {e}", band.name)))?;
        decode_single_band_tiff(&bytes)
    }
}

impl SceneProvider for SentinelHubProvider {
    fn fetch(&self, region: &MunicipalityRegion, week: EpiWeek) -> Result<SatelliteScene> {
        region.validate()?;
        let mut bands = Vec::with_capacity(self.band_specs.len());
        for spec in &self.band_specs {
            let raster = self.fetch_band(region, week, spec)?;
            bands.push(SceneBand { name: spec.name.clone(), mpp: spec.native_mpp, raster });
        }
        // The mosaicker returns an all-nodata (zero) image when the week had
        // no acquisition; surface that as the explicit missing-scene error.
        let all_zero = bands
            .iter()
            .all(|b| b.raster.as_slice().iter().all(|&v| v == 0.0));
        if all_zero {
            return Err(Error::MissingScene { region: region.name.clone(), week });
        }
        Ok(SatelliteScene { region: region.name.clone(), epiweek: week, bands })
    }
}

fn decode_single_band_tiff(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = Decoder::new(Cursor::new(bytes))
        .map_err(|e| Error::tiff("provider response", e))?;
    let (w, h) = decoder.dimensions().map_err(|e| Error::tiff("provider response dims", e))?;
    let data = match decoder.read_image().map_err(|e| Error::tiff("provider response data", e))? {
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect::<Vec<_>>(),
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        _ => return Err(Error::Provider("unsupported sample format in response".to_string())),
    };
    Ok(Raster::from_vec(h as usize, w as usize, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::BoundingBox;

    fn band_specs() -> Vec<BandSpec> {
        vec![
            BandSpec { name: "B02".into(), native_mpp: 10 },
            BandSpec { name: "B12".into(), native_mpp: 20 },
        ]
    }

    fn cali() -> MunicipalityRegion {
        MunicipalityRegion {
            name: "Cali".into(),
            bbox: BoundingBox { lat_min: 3.35, lon_min: -76.60, lat_max: 3.50, lon_max: -76.45 },
        }
    }

    #[test]
    fn fixture_fetch_is_deterministic_and_persists() {
        let fixture_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let week = EpiWeek::new(2017, 10).unwrap();

        let scene = SatelliteScene {
            region: "Cali".into(),
            epiweek: week,
            bands: band_specs()
                .into_iter()
                .map(|s| SceneBand {
                    name: s.name,
                    mpp: s.native_mpp,
                    raster: Raster::from_vec(3, 3, (0..9).map(f64::from).collect()),
                })
                .collect(),
        };
        SceneStore::new(fixture_dir.path()).save(&scene).unwrap();

        let provider = FixtureProvider::new(fixture_dir.path(), band_specs());
        let store = SceneStore::new(out_dir.path());
        let a = fetch_scene(&cali(), week, &provider, &store).unwrap();
        let b = fetch_scene(&cali(), week, &provider, &store).unwrap();
        assert_eq!(a, scene);
        assert_eq!(a, b);
        assert!(store.exists("Cali", week));
        // Persisted copy loads back identically.
        let reloaded = store.load("Cali", week, &band_specs()).unwrap();
        assert_eq!(reloaded, scene);
    }

    #[test]
    fn fixture_missing_week_is_missing_scene() {
        let fixture_dir = tempfile::tempdir().unwrap();
        let provider = FixtureProvider::new(fixture_dir.path(), band_specs());
        let err = provider.fetch(&cali(), EpiWeek::new(2017, 11).unwrap()).unwrap_err();
        assert!(matches!(err, Error::MissingScene { .. }));
    }

    #[test]
    fn process_request_covers_week_and_orders_by_least_cloud() {
        let provider = SentinelHubProvider::new(SentinelHubConfig::default(), band_specs());
        let week = EpiWeek::new(2017, 10).unwrap();
        let body = provider.request_body(&cali(), week, &band_specs()[1]);

        assert_eq!(body["input"]["data"][0]["dataFilter"]["mosaickingOrder"], "leastCC");
        assert_eq!(
            body["input"]["data"][0]["dataFilter"]["timeRange"]["from"],
            format!("{}T00:00:00Z", week.start_date())
        );
        assert_eq!(
            body["input"]["data"][0]["dataFilter"]["timeRange"]["to"],
            format!("{}T23:59:59Z", week.end_date())
        );
        assert_eq!(body["output"]["resx"], 20);
        let bbox = &body["input"]["bounds"]["bbox"];
        assert_eq!(bbox[0], -76.60);
        assert_eq!(bbox[1], 3.35);
        let script = body["evalscript"].as_str().unwrap();
        assert!(script.contains("\"B12\""));
        assert!(script.contains("UINT16"));
    }
}
