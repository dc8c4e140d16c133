//! Modelling radiation-induced bit flips in DRAM, from decay physics to
//! exploitability.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datafiles;
pub mod exploitlab;
pub mod fluxsim;
pub mod memmodel;
pub mod physics;
pub mod scanner;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
