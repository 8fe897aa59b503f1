//! A numerical laboratory for the two-dimensional free field with
//! scale-dependent variance on a square lattice box: exact closed forms for
//! the limiting free energy, entropy and overlap law; exact lattice
//! potential theory (Green matrices, harmonic measure); Monte Carlo over
//! field samples for Gibbs-measure statistics; and Ruelle-cascade sampling
//! for the limit objects.

pub mod acceptance;
pub mod analytics;
pub mod error;
pub mod field;
pub mod gibbs;
pub mod lattice;
pub mod mat;
pub mod rpc;
pub mod seed;

pub use error::{Error, Result};
