//! Numerical laboratory for conventional and dual-branch attention.
//!
//! The crate is layered bottom-up: [`numerics`] (dense matrices, seeded RNG),
//! [`autodiff`] (tape-based reverse mode), [`attention`] (the mechanisms),
//! [`grad_analysis`] and [`collapse`] (closed forms, bounds and diagnostics),
//! and [`model`] (a small decoder stack for faithfulness runs and toy training).
//! [`parallel`] holds the sweep helper that switches between rayon and a plain
//! loop depending on the `parallel` feature.

pub mod attention;
pub mod autodiff;
pub mod collapse;
pub mod error;
pub mod grad_analysis;
pub mod model;
pub mod numerics;
pub mod parallel;

pub use error::{LabError, Result};
