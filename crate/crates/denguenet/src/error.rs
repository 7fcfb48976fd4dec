//! Crate-wide error type.

use crate::epiweek::EpiWeek;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no acquisition for {region} in {week}")]
    MissingScene { region: String, week: EpiWeek },

    #[error("provider authentication failed: {0}")]
    ProviderAuth(String),

    #[error("provider rate limit hit{}", retry_after_secs.map(|s| format!(" (retry after {s}s)")).unwrap_or_default())]
    ProviderRateLimited { retry_after_secs: Option<u64> },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("invalid epi week {year}-W{week:02}: {reason}")]
    InvalidEpiWeek { year: i32, week: u32, reason: String },

    #[error("invalid region `{name}`: {reason}")]
    InvalidRegion { name: String, reason: String },

    #[error("case file row {row}: {reason}")]
    CaseParse { row: usize, reason: String },

    #[error("scene and case ranges have no overlapping weeks for {0}")]
    EmptyOverlap(String),

    #[error("resample target {target_mpp} m/px does not evenly divide band `{band}` at {native_mpp} m/px")]
    NonIntegerScale { band: String, native_mpp: u32, target_mpp: u32 },

    #[error("scene for {0} is not at a uniform resolution")]
    NonUniformScene(String),

    #[error("percentile thresholds degenerate: shadow {shadow} must be strictly below cloud {cloud}")]
    DegenerateThresholds { cloud: f64, shadow: f64 },

    #[error("correlation undefined for band pair ({a}, {b}): constant in every scene")]
    UndefinedCorrelation { a: usize, b: usize },

    #[error("automatic band selection found no SWIR cluster of size >= 2; select bands manually")]
    NoSwirCluster,

    #[error("need at least {need} scenes, got {got}")]
    TooFewScenes { need: usize, got: usize },

    #[error("series of {got} weeks is too short for window length {window} (+1 target)")]
    ShortSeries { got: usize, window: usize },

    #[error("need at least {need} samples to split, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("feature dimension mismatch for {branch} branch: model expects {expected}, sample has {got}")]
    DimMismatch { branch: String, expected: usize, got: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("metric inputs must be equal-length and non-empty (y: {y_len}, y_hat: {y_hat_len})")]
    MetricInput { y_len: usize, y_hat_len: usize },

    #[error("prediction series are not aligned on epi weeks")]
    MisalignedSeries,

    #[error("encoder weights unavailable: {0}")]
    EncoderWeights(String),

    #[error("stage `{stage}` is missing its inputs: run `{run_first}` first")]
    MissingArtifact { stage: String, run_first: String },

    #[error("cached artifacts were produced with config hash {found}, current config hashes to {expected}; pass --force to overwrite")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("tiff {context}: {source}")]
    Tiff {
        context: String,
        #[source]
        source: tiff::TiffError,
    },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn tiff(context: impl Into<String>, source: tiff::TiffError) -> Self {
        Error::Tiff { context: context.into(), source }
    }
}
