//! Matrix-free solver for the two-dimensional nonlocal Cahn-Hilliard equation
//!
//! ```text
//! phi_t = -M L mu,   mu = F'(phi) + eps^2 L phi,   (L u)(x) = ∫ J(x - y) (u(x) - u(y)) dy
//! ```
//!
//! discretised with trapezoid quadrature on a uniform square grid and stepped
//! with first-order and BDF2 scalar-auxiliary-variable (SAV) schemes. Every
//! linear solve goes through conjugate gradients whose matrix-vector products
//! use an FFT-diagonalised circulant embedding of the BTTB convolution matrix.

// Negated comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod conv;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod kernel;
pub mod krylov;
pub mod sav;

pub use error::{Error, Result};
