//! Relationship-guided class-incremental segmentation on synthetic phantoms.

pub mod augment;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod plots;
pub mod relation;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
