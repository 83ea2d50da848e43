//! Computational geometric measure theory on Carnot groups.
//!
//! This crate implements, at "desk scale" (finite point clouds, finite depth),
//! the machinery used to detect and certify 1-rectifiability of measures on
//! stratified nilpotent Lie groups:
//!
//! * [`group`] — exact group arithmetic in exponential coordinates (BCH
//!   multiplication for step ≤ 3), anisotropic dilations, homogeneous gauge
//!   norms, layer projections, horizontal lines, and stratified distances.
//! * [`cubes`] — Christ/David-style dyadic cube systems built from nested
//!   nets, with roundness balls, `Near` neighborhoods, and Whitney
//!   decompositions.
//! * [`measure`] — finite atomic measures with a declared resolution scale.
//! * [`trees`] — trees of cubes, leaves, normalized sum functions, the
//!   localization lemma, and lower-density trees.
//! * [`beta`] — all β-number variants (anisotropic β*, truncated β^{*,c},
//!   β**, ball-averaged β̃) and the associated Jones functions, plus lower
//!   density.
//! * [`tsp`] — the traveling-salesman curve construction on multiscale point
//!   clouds: per-vertex line fitting, graphs with bridges and extensions, a
//!   phantom-length ledger, and polyline realization with length accounting.
//! * [`classify`] — the rectifiable / purely-unrectifiable decomposition with
//!   witness-curve construction and the necessity (summability) check.
//! * [`gks`] — the iterated-weight doubling-measure construction with
//!   empirical doubling verification and mass-capturing curves.
//! * [`scenario`] — deterministic generators for test measures and point
//!   clouds.
//!
//! All types are immutable after construction and all operations are pure, so
//! everything is safe to call from parallel code; the heavy per-cube loops use
//! rayon internally with deterministic reduction order.

pub mod beta;
pub mod classify;
pub mod cubes;
pub mod error;
pub mod gks;
pub mod group;
pub mod measure;
pub mod scenario;
pub mod trees;
pub mod tsp;

pub use error::CarnotError;
