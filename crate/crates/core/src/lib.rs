//! Adaptive-focus coordinate ascent variational inference (AF-CAVI) for a
//! global-local sparse multi-trait regression model.
//!
//! The crate is organised around the stages of a mapping run:
//!
//! * [`data`] loads and standardises genotype/response matrices and block tables.
//! * [`model`] holds hyperparameters, the prior calibration and the variational state.
//! * [`engine`] runs the closed-form coordinate updates, the ELBO and the outer loop.
//! * [`focus`] decides which traits get their local factors refreshed each iteration.
//! * [`simulate`] generates synthetic genotypes, association patterns and responses.
//! * [`evaluate`] scores fits, including an exact enumeration oracle for small problems.
//! * [`pipeline`] fits LD blocks in parallel and summarises signals into loci.

pub mod data;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod focus;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
