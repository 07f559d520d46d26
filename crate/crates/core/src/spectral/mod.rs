//! Spectral positional encodings.

pub mod eigen;
pub mod pe;

pub use eigen::{eigendecompose, Eigen};
pub use pe::{fuse_pe, laplacian_pe, select_pe, FusionMode, PeFusion, PositionalEncoding};
