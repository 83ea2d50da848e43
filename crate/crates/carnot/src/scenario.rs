//! Seed-deterministic generators for the example measures used throughout
//! the test suites and the CLI.
//!
//! Each generator returns the ambient group together with a
//! [`DiscreteMeasure`]; geometric scenarios live in a fixed group (the
//! Lebesgue grid in ℝ², the vertical segment in the first Heisenberg group),
//! while group-agnostic ones (segment, polyline) accept any ambient group
//! and draw in its first layer.  All randomness comes from ChaCha8 seeded by
//! the scenario's `seed` field, so output is bit-identical across platforms.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CarnotError, Result};
use crate::group::{GroupPoint, StratificationSpec};
use crate::measure::{Atom, DiscreteMeasure};

/// A named generator plus its parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Scenario {
    /// `n` equal atoms on the unit horizontal segment along `e_1`.
    Segment { n: usize },
    /// Equal atoms along a random horizontal polyline of `legs` unit-sum
    /// legs (piecewise one-parameter subgroups chained by group products).
    PolylineCurve { n: usize, legs: usize, seed: u64 },
    /// Horizontal lift of a planar circle into the first Heisenberg group
    /// (trapezoid-rule lift `dz = ½(x dy − y dx)`), `n` equal atoms.
    HeisenbergHorizontalCurve { n: usize, radius: f64 },
    /// Planar self-similar set on the four corners of the unit square with
    /// contraction ratio `4^{-1/s}` (classic four-corner set at `s = 1`);
    /// `4^depth` equal atoms at the piece centers.
    Cantor { s: f64, depth: u32 },
    /// The `s = 1` four-corner set (ratio 1/4).
    FourCornerCantor { depth: u32 },
    /// Four-corner geometry with ratio 1/4 but atom masses given by products
    /// of the four branch weights.
    SelfSimilarUnbalanced { weights: [f64; 4], depth: u32 },
    /// Uniform `2^depth × 2^depth` grid on the unit square in ℝ².
    LebesgueGrid { depth: u32 },
    /// `n` equal atoms on the unit segment of the center axis of the first
    /// Heisenberg group.
    VerticalSegmentH1 { n: usize },
    /// Weighted sum of sub-scenarios (all must share one ambient group);
    /// each component is rescaled to the given total mass.
    AtomSum { parts: Vec<(Scenario, f64)> },
}

impl Scenario {
    /// The ambient group of the scenario, given a caller preference for the
    /// group-agnostic generators.
    pub fn group(&self, preferred: Option<&StratificationSpec>) -> Result<StratificationSpec> {
        match self {
            Scenario::Segment { .. } | Scenario::PolylineCurve { .. } => {
                Ok(preferred.cloned().unwrap_or_else(|| StratificationSpec::abelian(2)))
            }
            Scenario::HeisenbergHorizontalCurve { .. } | Scenario::VerticalSegmentH1 { .. } => {
                Ok(StratificationSpec::heisenberg(1))
            }
            Scenario::Cantor { .. }
            | Scenario::FourCornerCantor { .. }
            | Scenario::SelfSimilarUnbalanced { .. }
            | Scenario::LebesgueGrid { .. } => Ok(StratificationSpec::abelian(2)),
            Scenario::AtomSum { parts } => {
                let first = parts
                    .first()
                    .ok_or_else(|| CarnotError::EmptyInput("atom-sum needs parts".into()))?;
                first.0.group(preferred)
            }
        }
    }

    /// Generate the measure in the given group (which must match
    /// [`Scenario::group`]).
    pub fn generate(&self, spec: &StratificationSpec) -> Result<DiscreteMeasure> {
        match self {
            Scenario::Segment { n } => {
                require(*n >= 1, "segment needs n ≥ 1")?;
                let pts = (0..*n)
                    .map(|i| {
                        let mut p = vec![0.0; spec.total_dim()];
                        p[0] = (i as f64 + 0.5) / *n as f64;
                        GroupPoint(p)
                    })
                    .collect();
                DiscreteMeasure::uniform(pts, 1.0, log2_ceil(*n))
            }
            Scenario::PolylineCurve { n, legs, seed } => {
                require(*n >= 1 && *legs >= 1, "polyline needs n ≥ 1 and legs ≥ 1")?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let n1 = spec.layer_dims()[0];
                // Unit-total-length legs with random horizontal directions.
                let dirs: Vec<Vec<f64>> = (0..*legs)
                    .map(|_| {
                        let mut d: Vec<f64> = (0..n1).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let len = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                        for x in &mut d {
                            *x /= len;
                        }
                        d
                    })
                    .collect();
                let leg_len = 1.0 / *legs as f64;
                let mut pts = Vec::with_capacity(*n);
                let mut anchor = spec.identity();
                let mut leg_starts = vec![anchor.clone()];
                for d in &dirs {
                    let mut inc = vec![0.0; spec.total_dim()];
                    inc[..n1].copy_from_slice(d);
                    let end = spec.multiply(&anchor, &spec.dilate(leg_len, &GroupPoint(inc))?)?;
                    anchor = end.clone();
                    leg_starts.push(end);
                }
                for i in 0..*n {
                    let t = (i as f64 + 0.5) / *n as f64;
                    let leg = ((t * *legs as f64) as usize).min(*legs - 1);
                    let local = t * *legs as f64 - leg as f64;
                    let mut inc = vec![0.0; spec.total_dim()];
                    inc[..n1].copy_from_slice(&dirs[leg]);
                    let step = spec.dilate(local * leg_len, &GroupPoint(inc))?;
                    pts.push(spec.multiply(&leg_starts[leg], &step)?);
                }
                DiscreteMeasure::uniform(pts, 1.0, log2_ceil(*n))
            }
            Scenario::HeisenbergHorizontalCurve { n, radius } => {
                require(*n >= 2 && *radius > 0.0, "circle lift needs n ≥ 2, radius > 0")?;
                let xs: Vec<f64> = (0..*n)
                    .map(|i| radius * (std::f64::consts::TAU * i as f64 / *n as f64).cos())
                    .collect();
                let ys: Vec<f64> = (0..*n)
                    .map(|i| radius * (std::f64::consts::TAU * i as f64 / *n as f64).sin())
                    .collect();
                let pts = horizontal_lift(&xs, &ys);
                DiscreteMeasure::uniform(pts, 1.0, log2_ceil(*n))
            }
            Scenario::Cantor { s, depth } => {
                require(*s > 0.0, "cantor needs s > 0")?;
                let ratio = (4f64).powf(-1.0 / s);
                require(ratio < 0.5, "cantor needs contraction ratio < 1/2 (s < 2)")?;
                four_corner(ratio, *depth, None)
            }
            Scenario::FourCornerCantor { depth } => four_corner(0.25, *depth, None),
            Scenario::SelfSimilarUnbalanced { weights, depth } => {
                let total: f64 = weights.iter().sum();
                require(
                    weights.iter().all(|&w| w > 0.0) && (total - 1.0).abs() <= 1e-9,
                    "branch weights must be positive and sum to 1",
                )?;
                four_corner(0.25, *depth, Some(*weights))
            }
            Scenario::LebesgueGrid { depth } => {
                let m = 1usize << depth;
                let pts = (0..m * m)
                    .map(|i| {
                        let (a, b) = (i / m, i % m);
                        GroupPoint(vec![
                            (a as f64 + 0.5) / m as f64,
                            (b as f64 + 0.5) / m as f64,
                        ])
                    })
                    .collect();
                DiscreteMeasure::uniform(pts, 1.0, *depth)
            }
            Scenario::VerticalSegmentH1 { n } => {
                require(*n >= 1, "vertical segment needs n ≥ 1")?;
                let pts = (0..*n)
                    .map(|i| GroupPoint(vec![0.0, 0.0, (i as f64 + 0.5) / *n as f64]))
                    .collect();
                DiscreteMeasure::uniform(pts, 1.0, log2_ceil(*n))
            }
            Scenario::AtomSum { parts } => {
                require(!parts.is_empty(), "atom-sum needs parts")?;
                let mut atoms = Vec::new();
                let mut resolution = 0;
                for (part, mass) in parts {
                    require(*mass > 0.0, "atom-sum part masses must be positive")?;
                    let sub = part.generate(spec)?;
                    let scale = mass / sub.total_mass();
                    resolution = resolution.max(sub.resolution());
                    for a in sub.atoms() {
                        atoms.push(Atom { point: a.point.clone(), weight: a.weight * scale });
                    }
                }
                DiscreteMeasure::new(atoms, resolution)
            }
        }
    }
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(CarnotError::InvalidArgument(msg.into()))
    }
}

fn log2_ceil(n: usize) -> u32 {
    (n.max(1) as f64).log2().ceil() as u32
}

/// Horizontal lift of a planar polygonal curve into the first Heisenberg
/// group: the third coordinate accumulates `½(x dy − y dx)` by the
/// trapezoid rule, so each lifted segment is (to first order) horizontal.
pub fn horizontal_lift(xs: &[f64], ys: &[f64]) -> Vec<GroupPoint> {
    assert_eq!(xs.len(), ys.len());
    let mut z = 0.0;
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        if i > 0 {
            let (dx, dy) = (xs[i] - xs[i - 1], ys[i] - ys[i - 1]);
            let (mx, my) = (0.5 * (xs[i] + xs[i - 1]), 0.5 * (ys[i] + ys[i - 1]));
            z += 0.5 * (mx * dy - my * dx);
        }
        out.push(GroupPoint(vec![xs[i], ys[i], z]));
    }
    out
}

/// Self-similar measure on the four corners of the unit square with the
/// given contraction ratio; equal masses unless branch weights are given.
fn four_corner(ratio: f64, depth: u32, weights: Option<[f64; 4]>) -> Result<DiscreteMeasure> {
    let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
    let mut cells: Vec<(f64, f64, f64, f64)> = vec![(0.0, 0.0, 1.0, 1.0)];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(cells.len() * 4);
        for &(x, y, side, w) in &cells {
            for (b, &(cx, cy)) in corners.iter().enumerate() {
                let bw = weights.map(|ws| ws[b]).unwrap_or(0.25);
                next.push((
                    x + cx * side * (1.0 - ratio),
                    y + cy * side * (1.0 - ratio),
                    side * ratio,
                    w * bw,
                ));
            }
        }
        cells = next;
    }
    let atoms = cells
        .into_iter()
        .map(|(x, y, side, w)| Atom {
            point: GroupPoint(vec![x + side / 2.0, y + side / 2.0]),
            weight: w,
        })
        .collect();
    // Spatial resolution of the construction: cell side ratio^depth.
    let res = (depth as f64 * (1.0 / ratio).log2()).ceil() as u32;
    DiscreteMeasure::new(atoms, res)
}
