//! Multi-relational dynamic graph neural network for cross-sectional stock
//! ranking, built on a small dense reverse-mode differentiation engine.

pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod invariants;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
pub use matrix::{Matrix, SparseMatrix, MASKED};
pub use params::{Bindings, ParamStore};
pub use tape::{Tape, Var};
