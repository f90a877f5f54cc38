//! MobileFaceNet face-embedding networks on a small CPU tensor engine.
//!
//! Covers architecture construction for every variant, parameter and MAdds
//! accounting, receptive-field analysis, ArcFace toy training, batch-norm
//! folding, a binary model format and verification metrics.

pub mod analysis;
pub mod arch;
pub mod cli;
pub mod error;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};
