//! Multi-resolution feature fusion over frozen patch encoders.
//!
//! An image is resized to several scales, each view is encoded by a frozen
//! patch encoder, and the per-scale feature grids are upsampled to one grid
//! and concatenated along channels. The fused grid feeds linear dense heads
//! (segmentation, depth); for anomaly detection each scale keeps its own
//! nearest-neighbor memory bank and the per-scale score maps are averaged.

pub mod anomaly;
pub mod cli;
pub mod encoder;
pub mod fusion;
pub mod head;
pub mod metrics;
pub mod pyramid;
pub mod synth;
pub mod tensorio;

use thiserror::Error;

pub use anomaly::{AnomalyMap, MemoryBank};
pub use encoder::{Backbone, EncoderSpec, FeatureMap, Source, ToyEncoder};
pub use fusion::{fuse, FusedFeatureMap};
pub use head::{LinearHead, Task, TrainConfig};
pub use pyramid::{ImageTensor, ScaleSet};
pub use tensorio::{DatasetManifest, Tensor};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    TensorIo(#[from] tensorio::TensorIoError),
    #[error(transparent)]
    Pyramid(#[from] pyramid::PyramidError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error(transparent)]
    Head(#[from] head::HeadError),
    #[error(transparent)]
    Anomaly(#[from] anomaly::AnomalyError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

impl Error {
    /// Numeric failures (divergence, degenerate inputs) as opposed to bad data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Head(head::HeadError::NonFiniteLoss { .. })
                | Error::Fusion(fusion::FusionError::Degenerate)
                | Error::Anomaly(anomaly::AnomalyError::Fusion(fusion::FusionError::Degenerate))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
