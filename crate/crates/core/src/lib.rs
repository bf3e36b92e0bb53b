//! Unsupervised change detection on dual-polarization SAR time series with a
//! contrastive ConvLSTM variational autoencoder, plus classical baselines,
//! metrics and a synthetic scene generator.

pub mod baselines;
pub mod changepoint;
pub mod divergence;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod raster_io;
pub mod synthdata;
pub mod training;

pub use divergence::DivergenceKind;
pub use changepoint::{ChangePointResult, ThresholdMode};
pub use error::{Error, Result};
pub use inference::{BinaryChangeMap, ChangeMap, PatchEncoder};
pub use metrics::{AggregateMetrics, MetricsReport};
pub use model::{Clvae, LatentDistribution, ModelConfig};
pub use patching::{PatchBatch, TimeSeriesStack};
pub use raster_io::{GroundTruthMask, Polarization, SarTile};
