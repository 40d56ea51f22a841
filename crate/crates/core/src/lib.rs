//! Numerical laboratory for multi-polaron energies in periodic insulating crystals.
//!
//! The crystal is a periodic reduced Hartree-Fock Fermi sea on a supercell grid.
//! Its response to an external charge is a convex minimization over density-matrix
//! perturbations, solved by Frank-Wolfe. On top of that sit single- and few-particle
//! polaron solvers, localization operators and the macroscopic Pekar functionals.

pub mod coulomb;
pub mod crystal;
pub mod error;
pub mod grid;
pub mod lanczos;
pub mod linalg;
pub mod localization;
pub mod pekar;
pub mod polaron;
pub mod response;

pub use coulomb::{coulomb_norm, d_pair, potential_of, CoulombKernel, KernelMode};
pub use crystal::{CrystalState, NuclearDensity, ScfParams, Site};
pub use error::{Error, Result};
pub use grid::{FieldKind, GridFunction, LatticeSpec};
pub use pekar::{DielectricModel, GaussianProfile};
pub use polaron::{ManyBodyState, PolaronParams, PolaronResult, SingleState, Statistics};
pub use response::{minimize_fcrys, Perturbation, ResponseContext, ResponseParams, ResponseResult, Variant};

