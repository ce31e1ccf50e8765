//! Synthetic brain-MRI phantoms, 3-D segmentation networks, cycle-consistent
//! domain adaptation, and paired evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod rng;

pub use error::{Error, Result};
