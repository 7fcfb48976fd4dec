//! Weekly dengue-case forecasting from Sentinel-2 satellite imagery:
//! per-epi-week scene extraction, cloud and cloud-shadow tile swapping,
//! dual spatial feature extraction (statistical texture plus frozen-encoder
//! embeddings), and per-branch stacked-LSTM regression with an evaluation
//! and ablation harness.

pub mod bands;
pub mod config;
pub mod csr;
pub mod epiweek;
pub mod error;
pub mod eval;
pub mod features;
pub mod forecaster;
pub mod ingestion;
pub mod pipeline;
pub mod raster;
pub mod synth;

pub use epiweek::EpiWeek;
pub use error::{Error, Result};
pub use raster::Raster;
