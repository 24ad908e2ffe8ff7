//! Feed-forward editing of multi-view 3D point maps by residual displacement
//! fields: camera/point-map geometry, masked objectives with verified
//! gradients, a toy text-conditioned decoder, voxel-consensus mask filtering,
//! and a deterministic synthetic scene generator.

// Dense-grid code indexes multiple parallel buffers per loop; iterator
// rewrites obscure the stencil arithmetic.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod edit;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
