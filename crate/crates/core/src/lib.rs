//! Future-frame prediction for dynamic scenes from past RGB-D frames and
//! known camera poses, built on multi-plane images (MPIs).

pub mod cli;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod infill;
pub mod io;
pub mod metrics;
pub mod mpi;
pub mod pipeline;
pub mod selftest;
pub mod synthetic;
pub mod weights;

pub use error::{Error, Result};
