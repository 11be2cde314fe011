//! Structure-aware unsupervised domain adaptation for segmentation
//! self-training: hierarchical feature modulation, hypergraph plausibility
//! scoring, structural anomaly pruning, and a small self-training harness
//! over file-supplied feature maps.

pub mod cli;
pub mod config;
pub mod error;
pub mod fastmath;
pub mod hfm;
pub mod hpe;
pub mod metrics;
pub mod rng;
pub mod sap;
pub mod selftrain;
pub mod sht;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{argmax_map, FeatureMap, LabelMap, PredictionEnsemble, ProbMap, IGNORE};
