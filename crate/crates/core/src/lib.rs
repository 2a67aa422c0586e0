pub mod checkpoint;
pub mod config;
pub mod container;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nnkernels;
pub mod scaling;
pub mod synthdata;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use decoder::{Decoder, DecoderConfig};
pub use error::{Error, Result};
pub use evalkit::{EvalResult, SweepConfig, SweepTable};
pub use model::{build_network, ActivationGrid, Architecture, Network, NetworkConfig};
pub use nnkernels::FeatureMap;
pub use scaling::{ScaleGrid, ScalingTensor};
pub use synthdata::{ExperimentConfig, TrackAnnotation};
