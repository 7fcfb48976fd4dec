//! Declarative run configuration (TOML) and its provenance hash.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bands::SelectionPolicy;
use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::features::glcm::GlcmSpec;
use crate::features::vit::VitEncoder;
use crate::features::{ImageEncoder, ProjectionEncoder};
use crate::forecaster::{ModelConfig, Variant};
use crate::ingestion::{
    BandSpec, BoundingBox, FixtureProvider, MunicipalityRegion, SceneProvider,
    SentinelHubProvider,
};
use crate::synth::SynthSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub provider: ProviderSection,
    pub regions: Vec<RegionSection>,
    #[serde(default)]
    pub bands: BandsSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub csr: CsrSection,
    #[serde(default)]
    pub features: FeaturesSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub output_root: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Satellite, Variant::Cases, Variant::Combined]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Scene fixture root (scene store layout) for offline runs; also the
    /// destination of `synth`.
    pub fixture_dir: PathBuf,
    pub cases_file: PathBuf,
    pub start: EpiWeek,
    pub end: EpiWeek,
    #[serde(default = "default_target_mpp")]
    pub target_mpp: u32,
}

fn default_target_mpp() -> u32 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    /// `fixture` (default) or `sentinel-hub`.
    #[serde(default = "default_provider_mode")]
    pub mode: String,
    #[serde(default)]
    pub client_id: String,
    /// Name of the environment variable holding the OAuth client secret.
    #[serde(default)]
    pub client_secret_env: String,
    #[serde(default = "default_process_url")]
    pub base_url: String,
    #[serde(default = "default_token_url")]
    pub token_url: String,
    #[serde(default = "default_min_interval_ms")]
    pub min_request_interval_ms: u64,
}

fn default_provider_mode() -> String {
    "fixture".to_string()
}

fn default_process_url() -> String {
    "https://services.sentinel-hub.com/api/v1/process".to_string()
}

fn default_token_url() -> String {
    "https://services.sentinel-hub.com/auth/realms/main/protocol/openid-connect/token".to_string()
}

fn default_min_interval_ms() -> u64 {
    250
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            mode: default_provider_mode(),
            client_id: String::new(),
            client_secret_env: String::new(),
            base_url: default_process_url(),
            token_url: default_token_url(),
            min_request_interval_ms: default_min_interval_ms(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub name: String,
    /// `[lat_min, lon_min, lat_max, lon_max]` in WGS84 degrees.
    pub bbox: [f64; 4],
}

impl RegionSection {
    pub fn to_region(&self) -> MunicipalityRegion {
        MunicipalityRegion {
            name: self.name.clone(),
            bbox: BoundingBox {
                lat_min: self.bbox[0],
                lon_min: self.bbox[1],
                lat_max: self.bbox[2],
                lon_max: self.bbox[3],
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandsSection {
    pub names: Vec<String>,
    pub native_mpp: Vec<u32>,
    pub swir: Vec<String>,
}

impl Default for BandsSection {
    fn default() -> Self {
        // Sentinel-2 L2A storage order.
        let names = ["B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12"];
        let native = [60, 10, 10, 10, 20, 20, 20, 10, 20, 60, 20, 20];
        BandsSection {
            names: names.iter().map(|s| s.to_string()).collect(),
            native_mpp: native.to_vec(),
            swir: vec!["B11".to_string(), "B12".to_string()],
        }
    }
}

impl BandsSection {
    pub fn specs(&self) -> Vec<BandSpec> {
        self.names
            .iter()
            .zip(&self.native_mpp)
            .map(|(name, &native_mpp)| BandSpec { name: name.clone(), native_mpp })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    /// `paper-default` or `automatic`.
    pub policy: String,
    pub threshold: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection { policy: "paper-default".to_string(), threshold: 0.8 }
    }
}

impl SelectionSection {
    pub fn to_policy(&self, swir: &[String]) -> Result<SelectionPolicy> {
        match self.policy.as_str() {
            "paper-default" => Ok(SelectionPolicy::PaperDefault),
            "automatic" => Ok(SelectionPolicy::Automatic {
                threshold: self.threshold,
                swir_bands: swir.to_vec(),
            }),
            other => Err(Error::InvalidConfig(format!(
                "selection policy `{other}` is not `paper-default` or `automatic`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsrSection {
    pub p_cloud: u32,
    pub p_shadow: u32,
}

impl Default for CsrSection {
    fn default() -> Self {
        CsrSection { p_cloud: 95, p_shadow: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    #[serde(default)]
    pub glcm: GlcmSpec,
    /// `projection:<seed>:<dim>` or `vit:<weights path>`.
    pub encoder: String,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        FeaturesSection { glcm: GlcmSpec::default(), encoder: "projection:17:16".to_string() }
    }
}

impl FeaturesSection {
    pub fn build_encoder(&self, config_dir: &Path) -> Result<Box<dyn ImageEncoder>> {
        let parts: Vec<&str> = self.encoder.splitn(3, ':').collect();
        match parts.as_slice() {
            ["projection", seed, dim] => {
                let seed: u64 = seed.parse().map_err(|_| {
                    Error::InvalidConfig(format!("bad projection seed in `{}`", self.encoder))
                })?;
                let dim: usize = dim.parse().map_err(|_| {
                    Error::InvalidConfig(format!("bad projection dim in `{}`", self.encoder))
                })?;
                Ok(Box::new(ProjectionEncoder::new(seed, dim)))
            }
            ["vit", path] | ["vit", path, _] => {
                let p = Path::new(path);
                let resolved = if p.is_absolute() { p.to_path_buf() } else { config_dir.join(p) };
                Ok(Box::new(VitEncoder::load(&resolved)?))
            }
            _ => Err(Error::InvalidConfig(format!(
                "encoder `{}` is not `projection:<seed>:<dim>` or `vit:<path>`",
                self.encoder
            ))),
        }
    }
}

/// Model hyperparameters minus the per-run branch set and seed, which the
/// pipeline fills in per variant and per repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub window: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub dropout: f64,
    pub dense_width: usize,
    pub batch_size: usize,
    pub intermediate: Vec<usize>,
    pub texture_final: usize,
    pub embedding_final: usize,
    pub cases_final: usize,
    pub leaky_slope: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            window: m.window,
            epochs: m.epochs,
            initial_lr: m.initial_lr,
            dropout: m.dropout,
            dense_width: m.dense_width,
            batch_size: m.batch_size,
            intermediate: m.intermediate,
            texture_final: m.texture_final,
            embedding_final: m.embedding_final,
            cases_final: m.cases_final,
            leaky_slope: m.leaky_slope,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            branches: ModelConfig::default().branches,
            intermediate: self.intermediate.clone(),
            texture_final: self.texture_final,
            embedding_final: self.embedding_final,
            cases_final: self.cases_final,
            dropout: self.dropout,
            dense_width: self.dense_width,
            leaky_slope: self.leaky_slope,
            epochs: self.epochs,
            initial_lr: self.initial_lr,
            batch_size: self.batch_size,
            window: self.window,
            seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((config, dir))
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::InvalidConfig("at least one region is required".to_string()));
        }
        for r in &self.regions {
            r.to_region().validate()?;
        }
        let mut names: Vec<&str> = self.regions.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.regions.len() {
            return Err(Error::InvalidConfig("duplicate region names".to_string()));
        }
        if self.bands.names.len() != self.bands.native_mpp.len() {
            return Err(Error::InvalidConfig(
                "bands.names and bands.native_mpp must have equal length".to_string(),
            ));
        }
        if self.bands.names.is_empty() {
            return Err(Error::InvalidConfig("band table is empty".to_string()));
        }
        for &mpp in &self.bands.native_mpp {
            if mpp % self.data.target_mpp != 0 {
                return Err(Error::InvalidConfig(format!(
                    "native resolution {mpp} not divisible by target {}",
                    self.data.target_mpp
                )));
            }
        }
        if self.data.start > self.data.end {
            return Err(Error::InvalidConfig(format!(
                "start {} is after end {}",
                self.data.start, self.data.end
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidConfig("run.seeds must not be empty".to_string()));
        }
        if self.run.variants.is_empty() {
            return Err(Error::InvalidConfig("run.variants must not be empty".to_string()));
        }
        self.split.validate()?;
        self.selection.to_policy(&self.bands.swir)?;
        self.model.to_model_config(0).validate()?;
        match self.provider.mode.as_str() {
            "fixture" | "sentinel-hub" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "provider.mode `{other}` is not `fixture` or `sentinel-hub`"
                )))
            }
        }
        Ok(())
    }

    /// Hash of the canonical serialized config, recorded in artifacts.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn region_names(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.name.clone()).collect()
    }

    pub fn weeks(&self) -> Vec<EpiWeek> {
        self.data.start.range_through(self.data.end).collect()
    }

    /// Builds the scene provider; `config_dir` resolves relative fixture
    /// paths.
    pub fn build_provider(&self, config_dir: &Path) -> Result<Box<dyn SceneProvider>> {
        match self.provider.mode.as_str() {
            "fixture" => {
                let root = self.resolve(config_dir, &self.data.fixture_dir).join("scenes");
                Ok(Box::new(FixtureProvider::new(root, self.bands.specs())))
            }
            "sentinel-hub" => {
                let secret = std::env::var(&self.provider.client_secret_env).map_err(|_| {
                    Error::ProviderAuth(format!(
                        "environment variable {} with the client secret is not set",
                        self.provider.client_secret_env
                    ))
                })?;
                let shc = crate::ingestion::provider::SentinelHubConfig {
                    base_url: self.provider.base_url.clone(),
                    token_url: self.provider.token_url.clone(),
                    client_id: self.provider.client_id.clone(),
                    client_secret: secret,
                    collection: "sentinel-2-l2a".to_string(),
                    min_request_interval: Duration::from_millis(
                        self.provider.min_request_interval_ms,
                    ),
                };
                Ok(Box::new(SentinelHubProvider::new(shc, self.bands.specs())))
            }
            other => Err(Error::InvalidConfig(format!("unknown provider mode `{other}`"))),
        }
    }

    pub fn resolve(&self, config_dir: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            config_dir.join(p)
        }
    }
}
