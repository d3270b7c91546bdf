//! Encoder-decoder forecaster and the reconstruction-based anomaly scorer.

mod autoencoder;
mod config;
mod cotn;
pub mod layers;

pub use autoencoder::{percentile, sample_weight, AnomalyScore, Autoencoder, AutoencoderConfig};
pub use config::ModelConfig;
pub use cotn::{Cotn, Encoded, Trace, CONFIG_FILE, PARAMS_FILE};
pub use layers::{distill_layer, distill_loss, positional_encoding};
