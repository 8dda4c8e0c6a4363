//! Encoder–decoder segmentation networks with attention-guided dense
//! upsampling, built on a small reverse-mode tensor substrate.

pub mod blocks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod substrate;
pub mod training;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Trailing `#` lines for CSV outputs: toolkit version and the producing
/// configuration as one line of JSON.
pub fn csv_footer(config: &serde_json::Value) -> String {
    format!("# toolkit: aunet {VERSION}\n# config: {config}\n")
}
