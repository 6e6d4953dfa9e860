//! Self-correcting multi-token masked generation over discrete token grids.
//!
//! A grid is revealed group by group along a fixed (Halton by default) visit
//! order. Training corrupts the already-revealed context with tokens drawn
//! from the same grid and asks the model to recover both the next group and
//! the clean context; sampling uses that ability to resample context tokens the
//! model no longer agrees with.

pub mod corruption;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod nn;
pub mod pixel;
pub mod predictor;
pub mod sampling;
pub mod sequencing;
pub mod token;
pub mod training;

pub use error::{Error, Result};
