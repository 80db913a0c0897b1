//! Mixed Raviart-Thomas discretizations of Darcy flow and their localized
//! orthogonal decomposition (LOD) multiscale solver.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`]: nested structured triangulations, edges, coarse patches;
//! * [`fields`]: diffusion coefficients and source terms;
//! * [`sparse`] and [`fem`]: RT0/P0 assembly and transfer operators;
//! * [`saddle`]: constrained symmetric indefinite solves;
//! * [`lod`]: correctors, the multiscale solve and diagnostics;
//! * [`xp`]: experiment drivers, CSV and SVG output.

pub mod error;
pub mod fem;
pub mod fields;
pub mod lod;
pub mod mesh;
pub mod saddle;
pub mod sparse;
pub mod xp;

pub use error::{Error, Result};
