//! Spatially constrained local correlation in multivariate volumes,
//! visualized as continuous indexed points in angle-uniform parallel
//! coordinates, with brushing-based classification and volume rendering.

// NaN-rejecting `!(x > 0.0)` checks and index loops over parallel arrays
// are deliberate throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod classify;
pub mod density;
pub mod error;
pub mod fit;
pub mod indexed;
pub mod kdtree;
pub mod octree;
pub mod pipeline;
pub mod render;
pub mod saliency;
pub mod synthetic;
pub mod volume;

pub use error::{Error, Result};
