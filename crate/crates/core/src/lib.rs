//! Discrete, nonlocal and continuum t-SNE/SNE energies, the exact 1D
//! continuum solver and the cutting-map constructions.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::excessive_precision,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod continuum;
pub mod data;
pub mod discrete;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod kernels;
pub mod lattice;
pub mod microstructure;
pub mod nonlocal;
pub mod quad;
pub mod solver1d;

pub use error::{Error, Result};
