//! Horizontal lines, point-to-line distances, and the stratified distance.
//!
//! A horizontal line is a left coset `L = x · {(t·v, 0, …, 0) : t ∈ ℝ}` with
//! unit first-layer direction `v`.  Distances from a point to a line are 1-D
//! minimizations over the parameter `t`; the profile is not provably
//! unimodal, so we evaluate a uniform grid over a certified window (the
//! first-layer term dominates far from the projection foot, which bounds
//! where the minimizer can live) and refine locally by golden-section search.

use serde::{Deserialize, Serialize};

use crate::error::{CarnotError, Result};
use crate::group::{GroupPoint, HomogeneousNorm, StratificationSpec};

/// Default number of grid samples for 1-D line searches.
pub const DEFAULT_LINE_SAMPLES: usize = 512;
/// Relative tolerance of the local refinement.
const REFINE_REL_TOL: f64 = 1e-7;

/// A horizontal line: base point and unit first-layer direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalLine {
    pub base: GroupPoint,
    pub direction: Vec<f64>,
}

impl HorizontalLine {
    /// Construct a line, normalizing the direction; a (near-)zero direction
    /// is rejected.
    pub fn new(spec: &StratificationSpec, base: GroupPoint, direction: Vec<f64>) -> Result<Self> {
        if base.dim() != spec.total_dim() {
            return Err(CarnotError::SpecMismatch {
                expected: spec.total_dim(),
                got: base.dim(),
            });
        }
        if direction.len() != spec.layer_dims()[0] {
            return Err(CarnotError::SpecMismatch {
                expected: spec.layer_dims()[0],
                got: direction.len(),
            });
        }
        let len = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(len > 1e-300) {
            return Err(CarnotError::InvalidArgument(
                "horizontal line direction must be nonzero".into(),
            ));
        }
        let direction = direction.iter().map(|x| x / len).collect();
        Ok(Self { base, direction })
    }

    /// The point `x·(t·v, 0, …, 0)`.
    pub fn point_at(&self, spec: &StratificationSpec, t: f64) -> GroupPoint {
        GroupPoint(self.point_at_raw(spec, t))
    }

    pub(crate) fn point_at_raw(&self, spec: &StratificationSpec, t: f64) -> Vec<f64> {
        let mut step = vec![0.0; spec.total_dim()];
        for (s, v) in step.iter_mut().zip(&self.direction) {
            *s = t * v;
        }
        spec.multiply_raw(&self.base.0, &step)
    }

    /// Parameter of the orthogonal projection of `π_1(z)` onto the projected
    /// line `π_1(L)` — the natural center for search windows.
    pub(crate) fn foot_param(&self, spec: &StratificationSpec, z: &[f64]) -> f64 {
        let n1 = spec.layer_dims()[0];
        (0..n1).map(|c| (z[c] - self.base.0[c]) * self.direction[c]).sum()
    }
}

/// Result of a 1-D line search: minimal value and minimizing parameter.
#[derive(Clone, Copy, Debug)]
pub struct LineSearchResult {
    pub value: f64,
    pub t: f64,
}

/// Grid + golden-section minimization of `f` over `[lo, hi]`.
fn grid_refine(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, samples: usize) -> LineSearchResult {
    debug_assert!(hi >= lo);
    let n = samples.max(3);
    let h = (hi - lo) / (n as f64 - 1.0);
    let mut best = (f(lo), lo, 0usize);
    for i in 1..n {
        let t = lo + h * i as f64;
        let v = f(t);
        if v < best.0 {
            best = (v, t, i);
        }
    }
    // Golden-section refinement on the bracket around the best grid sample.
    let (mut a, mut b) = (
        (best.1 - h).max(lo),
        (best.1 + h).min(hi),
    );
    let inv_phi = 0.618_033_988_749_894_9;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > REFINE_REL_TOL * (1.0 + a.abs().max(b.abs())) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    let v = f(t);
    if v < best.0 {
        LineSearchResult { value: v, t }
    } else {
        LineSearchResult { value: best.0, t: best.1 }
    }
}

/// Distance from `π_i(z)` to the projected line `π_i(L)` in the quotient
/// metric `d_i`: `min_t d_i(π_i z, π_i(x·(tv,0,…)))`.
///
/// `window` is the search interval for `t`; `None` derives a certified window
/// from the bound `d_i ≥ d_1 ≥ |t − t*| / η` where `t*` is the projection
/// foot.  Returns the distance and the minimizing parameter.
pub fn dist_to_line(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    z: &GroupPoint,
    line: &HorizontalLine,
    layer: usize,
    window: Option<(f64, f64)>,
    samples: usize,
) -> Result<LineSearchResult> {
    if layer == 0 || layer > spec.step() {
        return Err(CarnotError::InvalidArgument(format!(
            "layer index {layer} out of range 1..={}",
            spec.step()
        )));
    }
    let f = |t: f64| {
        let p = line.point_at_raw(spec, t);
        norm.distance_trunc(spec, &z.0, &p, layer)
    };
    let (lo, hi) = match window {
        Some((lo, hi)) => {
            if hi < lo {
                return Err(CarnotError::InvalidArgument("empty search window".into()));
            }
            (lo, hi)
        }
        None => {
            let t0 = line.foot_param(spec, &z.0);
            let w = norm.eta * f(t0) * 1.001 + 1e-12;
            (t0 - w, t0 + w)
        }
    };
    Ok(grid_refine(&f, lo, hi, samples))
}

/// The stratified distance
/// `β̃(x, y; r) = ( Σ_{i=1}^s (d_i(π_i x, π_i y) / r)^{2i} )^{1/(2s)}`.
pub fn stratified_dist(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    x: &GroupPoint,
    y: &GroupPoint,
    r: f64,
) -> Result<f64> {
    if !(r > 0.0) {
        return Err(CarnotError::InvalidArgument(format!("scale r must be positive, got {r}")));
    }
    Ok(stratified_power_raw(spec, norm, &x.0, &y.0, r).powf(1.0 / (2.0 * spec.step() as f64)))
}

/// `β̃(x, y; r)^{2s}` on raw coordinates (hot path; one displacement, then a
/// gauge per layer).
pub(crate) fn stratified_power_raw(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    x: &[f64],
    y: &[f64],
    r: f64,
) -> f64 {
    let disp = spec.displacement_raw(x, y);
    stratified_power_of_disp(spec, norm, &disp, r)
}

/// `β̃^{2s}` of an already-computed displacement.
fn stratified_power_of_disp(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    disp: &[f64],
    r: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 1..=spec.step() {
        let di = norm.norm_trunc(spec, disp, i);
        acc += (di / r).powi(2 * i as i32);
    }
    acc
}

/// Windowed minimization of `t ↦ β̃(z, l(t); r)^{2s}`.
///
/// The displacement `log(l(t)⁻¹·z)` is coordinatewise a polynomial of degree
/// at most 2 in `t` when the step is ≤ 3 (the only bracket nestings the
/// group law produces are linear or quadratic in the line parameter), so
/// three exact evaluations determine it and every search sample costs a few
/// flops instead of two group products.
fn line_power_search(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    z: &[f64],
    line: &HorizontalLine,
    r: f64,
    samples: usize,
) -> LineSearchResult {
    let t0 = line.foot_param(spec, z);
    if spec.step() <= 3 {
        let n = spec.total_dim();
        // Interpolate around the foot for conditioning.
        let d0 = spec.displacement_raw(z, &line.point_at_raw(spec, t0));
        let dp = spec.displacement_raw(z, &line.point_at_raw(spec, t0 + 1.0));
        let dm = spec.displacement_raw(z, &line.point_at_raw(spec, t0 - 1.0));
        let mut lin = vec![0.0; n];
        let mut quad = vec![0.0; n];
        for c in 0..n {
            lin[c] = 0.5 * (dp[c] - dm[c]);
            quad[c] = 0.5 * (dp[c] + dm[c]) - d0[c];
        }
        let mut disp = vec![0.0; n];
        let f = move |t: f64| {
            let u = t - t0;
            for c in 0..n {
                disp[c] = d0[c] + u * (lin[c] + u * quad[c]);
            }
            stratified_power_of_disp(spec, norm, &disp, r)
        };
        let f = std::cell::RefCell::new(f);
        let eval = |t: f64| (f.borrow_mut())(t);
        let w = norm.eta * r * eval(t0).sqrt() * 1.001 + 1e-12;
        return grid_refine(&eval, t0 - w, t0 + w, samples);
    }
    let f = |t: f64| {
        let p = line.point_at_raw(spec, t);
        stratified_power_raw(spec, norm, z, &p, r)
    };
    let w = norm.eta * r * f(t0).sqrt() * 1.001 + 1e-12;
    grid_refine(&f, t0 - w, t0 + w, samples)
}

/// Joint stratified distance from a point to a line:
/// `β̃(z, L; r) = inf_y∈L β̃(z, y; r)`, realized by the windowed 1-D search.
/// Returns the distance (the 2s-th root) and the minimizing parameter.
pub fn stratified_dist_to_line(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    z: &GroupPoint,
    line: &HorizontalLine,
    r: f64,
    samples: usize,
) -> Result<LineSearchResult> {
    if !(r > 0.0) {
        return Err(CarnotError::InvalidArgument(format!("scale r must be positive, got {r}")));
    }
    // The first-layer term alone gives f(t) ≥ (|t − t*|/(ηr))², bounding the
    // minimizer inside |t − t*| ≤ ηr·√f(t*).
    let res = line_power_search(spec, norm, &z.0, line, r, samples);
    Ok(LineSearchResult {
        value: res.value.powf(1.0 / (2.0 * spec.step() as f64)),
        t: res.t,
    })
}

/// Hot-path form of the point-to-line stratified distance: returns
/// `min_t β̃(z, l(t); r)^{2s}` on raw coordinates.  Step-1 groups use the
/// closed-form Euclidean point-line distance; otherwise the windowed search.
pub(crate) fn stratified_power_to_line(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    z: &[f64],
    line: &HorizontalLine,
    r: f64,
    samples: usize,
) -> f64 {
    if spec.step() == 1 {
        // d(z, L) = |(p − b) − ((p − b)·v)v| / η.
        let n1 = spec.layer_dims()[0];
        let mut dot = 0.0;
        for c in 0..n1 {
            dot += (z[c] - line.base.0[c]) * line.direction[c];
        }
        let mut d2 = 0.0;
        for c in 0..n1 {
            let resid = z[c] - line.base.0[c] - dot * line.direction[c];
            d2 += resid * resid;
        }
        return d2 / (norm.eta * norm.eta * r * r);
    }
    line_power_search(spec, norm, z, line, r, samples).value
}

/// Smallest Euclidean tube radius (in dilated coordinates) admitting `z`:
/// `min_t |δ_{1/r}( (x·(tv,0,…))⁻¹ · z )|`.  Membership of the `α`-tube
/// `L·δ_r(B(α^s))` is `tube_gauge ≤ α^s`.
pub fn tube_gauge(
    spec: &StratificationSpec,
    z: &GroupPoint,
    line: &HorizontalLine,
    r: f64,
    samples: usize,
) -> Result<LineSearchResult> {
    if !(r > 0.0) {
        return Err(CarnotError::InvalidArgument(format!("scale r must be positive, got {r}")));
    }
    let f = |t: f64| {
        let p = line.point_at_raw(spec, t);
        let disp = spec.displacement_raw(&p, &z.0);
        let scaled = spec.dilate_raw(1.0 / r, &disp);
        scaled.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let t0 = line.foot_param(spec, &z.0);
    // First-layer coordinates scale by 1/r, so f(t) ≥ |t − t*|/r.
    let w = r * f(t0) * 1.001 + 1e-12;
    Ok(grid_refine(&f, t0 - w, t0 + w, samples))
}

/// Whether `z` lies in the tube `L · δ_r(B_{ℝ^N}(α^s))`.
pub fn tube_membership(
    spec: &StratificationSpec,
    z: &GroupPoint,
    line: &HorizontalLine,
    r: f64,
    alpha: f64,
    samples: usize,
) -> Result<bool> {
    if alpha < 0.0 {
        return Err(CarnotError::InvalidArgument("alpha must be nonnegative".into()));
    }
    let g = tube_gauge(spec, z, line, r, samples)?;
    let thr = alpha.powi(spec.step() as i32);
    Ok(g.value <= thr * (1.0 + 1e-9) + 1e-12)
}
