//! Arithmetic and metric geometry of step-s Carnot groups in exponential
//! coordinates.
//!
//! A point of the group is a real vector of length `N = n_1 + … + n_s`,
//! logically grouped by layer as `(x_1, …, x_s)` with `x_i ∈ ℝ^{n_i}`.
//! Multiplication is the truncated Baker–Campbell–Hausdorff polynomial driven
//! by the Lie structure constants (exact for nilpotency step ≤ 3), inversion
//! is coordinate negation, and the dilations `δ_t` scale layer `i` by `t^i`.
//!
//! Distances come from a homogeneous gauge norm: the Minkowski gauge of a
//! small Euclidean ball under the dilations.  Truncation to the first `i`
//! layers is a group homomorphism onto the quotient group `G_i`, and the same
//! gauge on the truncated coordinates yields the nested quotient distances
//! `d_i` used by the stratified β-numbers.

pub(crate) mod line;
mod norm;
mod spec;

pub use line::{
    dist_to_line, stratified_dist, stratified_dist_to_line, tube_gauge, tube_membership,
    HorizontalLine, LineSearchResult, DEFAULT_LINE_SAMPLES,
};
pub use norm::{calibrate_eta, triangle_trials_pass, HomogeneousNorm};
pub use spec::{BracketEntry, GroupDocument, GroupPoint, StratificationSpec};
