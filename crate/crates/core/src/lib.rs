//! Mixtures of neural operators on discretized function spaces.
//!
//! Inputs are functions on a uniform grid over `[0,1]^d`. A routing tree of
//! center functions, built by nested k-means over a sample cloud, sends each
//! input to exactly one leaf; every leaf owns a small finite-rank neural
//! operator stored in its own shard and loaded only when an input reaches it.

pub mod basis;
pub mod budget;
pub mod error;
pub mod grid;
pub mod io;
pub mod mono;
pub mod nn;
pub mod operator;
pub mod optim;
pub mod sobolev;
pub mod tasks;
pub mod tree;

pub use basis::{BasisFamily, BasisSet};
pub use error::{Error, Result};
pub use grid::{GridFunction, GridSpec, Mask};
pub use sobolev::SobolevBallSpec;
