//! One-class learning for synthetic-voice spoofing detection.
//!
//! The pipeline is: protocol parsing and audio ingestion ([`protocol`],
//! [`audio`]), LFCC features ([`lfcc`]), an embedding network with
//! attentive temporal pooling ([`net`]), margin-based loss heads
//! ([`loss`]), training ([`optim`], [`trainer`], [`checkpoint`]) and
//! evaluation ([`metrics`], [`pca`]).

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod lfcc;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pca;
pub mod protocol;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use features::FeatureMatrix;
