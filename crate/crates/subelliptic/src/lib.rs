//! Symbolic and numerical tools for Hörmander vector fields and subelliptic
//! operators on the torus.
//!
//! The crate is organised around a small pipeline:
//!
//! * [`symexpr`] — a closed expression language (rationals, coordinates,
//!   sums, products, sin, cos) with exact differentiation,
//! * [`vecfield`] — vector fields, Lie brackets, multi-commutators and the
//!   truncated Campbell–Baker–Hausdorff correction fields,
//! * [`hormander`] — the uniform Hörmander condition decided through four
//!   quantitative criteria with cross-checked inequalities,
//! * [`flows`] — adaptive flow integration, product-remainder experiments
//!   and Hölder-norm estimators,
//! * [`spectral`] — torus discretisations of `H = Σ Xᵢ*Xᵢ`, fractional
//!   Laplacians as Fourier multipliers, commutator-bound and subelliptic
//!   constant estimation.
//!
//! Sample sweeps are data-parallel via rayon when the default `parallel`
//! feature is enabled; disabling it yields a sequential build with
//! identical results.

pub mod flows;
pub mod grid;
pub mod hormander;
pub mod par;
pub mod spectral;
pub mod symexpr;
pub mod vecfield;

pub use symexpr::Expr;
pub use vecfield::{FieldSystem, MultiIndex, VectorField};
