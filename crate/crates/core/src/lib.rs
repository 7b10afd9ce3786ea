//! Spectral simulation and numerical verification for the coupled
//! Korteweg-de Vries system of Gear-Grimshaw type.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`] periodic Fourier discretisation, norms and the Airy group.
//! * [`model`] system coefficients, diagonalisation and change of scale.
//! * [`dynamics`] ETDRK4 time stepping, Picard-Duhamel iteration, PDE residuals.
//! * [`rough_data`] regularised singular data, solitons, file-backed data.
//! * [`diagnostics`] conserved functionals, local norms, decay fits,
//!   refinement studies and Bourgain-norm probes.
//! * [`operator_lab`] space-time operator algebra for `L`, `J` and `P`.
//! * [`io`] binary field dumps and CSV/JSON emission.
//!
//! Data-parallel loops go through [`par`], which runs on rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod model;
pub mod operator_lab;
pub mod par;
pub mod rough_data;
pub mod spectral;

pub use error::{Error, Result};
