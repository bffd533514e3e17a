//! Error-bounded lossy compression for 3D scientific float volumes with
//! group-wise learned residual enhancers.
//!
//! The pipeline: a predictive error-bounded codec compresses a volume and
//! emits the decompressed data as a by-product; the residual between the
//! original and the reconstruction is partitioned into value-magnitude
//! groups; a tiny convolutional enhancer is trained per group to predict
//! that group's residual from the decompressed slices; the trained weights
//! ride along in the archive and are replayed at decompression time to
//! lift reconstruction quality at negligible size cost.

pub mod codec;
pub mod container;
pub mod enhancer;
mod error;
pub mod grouping;
pub mod metrics;
pub mod nn;
pub mod volume;
pub mod wire;

pub use error::{Error, Result};
