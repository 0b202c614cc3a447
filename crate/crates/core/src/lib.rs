//! Lane geometry and evaluation toolkit built around the anchor-chain lane
//! representation.
pub mod assignment;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod line_iou;
pub mod losses;
pub mod metrics;
pub mod mrda;
pub use error::{Error, Result};
