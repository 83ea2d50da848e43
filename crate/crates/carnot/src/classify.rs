//! Rectifiable/unrectifiable decomposition and witness-curve construction.
//!
//! An atom is labeled *rect* when its resolution-truncated lower density
//! stays above `d_min` and the partial sums of its Jones function flatten
//! out (least-squares slope over the deepest half of the levels below
//! `slope_max`); otherwise *pure*.  True divergence is undecidable at
//! finite resolution, so the slope criterion is an engineering surrogate
//! whose thresholds are part of every report.
//!
//! Witness curves realize the rect part: for each maximal lower-regularity
//! tree at threshold `c`, localization prunes low-mass branches, a
//! near-optimal atom `z_R` is picked in each ball `2B_R` (deterministic
//! argmin over support atoms, with the Chebyshev-style bound against the
//! ball average checked), the `z`-atoms at each tree level form nested
//! separated clouds, and the curve builder turns them into a polyline.  A
//! necessity check runs the reverse direction: summing `β*^{2s}·diam` over
//! cubes meeting a given curve and comparing against its length plus the
//! off-curve mass.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::beta::{BetaContext, BetaRecord, BetaReport, JonesVariant};
use crate::cubes::{CubeId, CubeSystem};
use crate::error::{CarnotError, Result};
use crate::group::line::stratified_power_to_line;
use crate::group::GroupPoint;
use crate::measure::DiscreteMeasure;
use crate::trees::{cube_masses, density_tree, diam_2b, localize, CubeTree};
use crate::tsp::{
    build_graphs, fit_cloud_lines, length_budget, realize_curve, CloudSequence, Polyline,
    DEFAULT_EPS,
};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClassifyConfig {
    /// Lower-density cutoff for the rect label.
    pub d_min: f64,
    /// Slope cutoff factor: `slope_max = slope_factor·median shallow
    /// per-level term + 1e−9`.
    pub slope_factor: f64,
    /// Localization parameters for witness curves.
    pub eps_loc: f64,
    pub n_cap: f64,
    /// Density threshold for witness trees.
    pub c: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { d_min: 0.01, slope_factor: 0.05, eps_loc: 0.5, n_cap: 10.0, c: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Rect,
    Pure,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomRecord {
    pub index: usize,
    pub weight: f64,
    pub density: f64,
    pub jones_partials: Vec<f64>,
    pub slope: f64,
    pub label: Label,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decomposition {
    pub atoms: Vec<AtomRecord>,
    pub rect_mass: f64,
    pub pure_mass: f64,
    pub d_min: f64,
    pub slope_max: f64,
}

impl Decomposition {
    pub fn rect_fraction(&self) -> f64 {
        self.rect_mass / (self.rect_mass + self.pure_mass)
    }
    pub fn pure_fraction(&self) -> f64 {
        self.pure_mass / (self.rect_mass + self.pure_mass)
    }
}

/// Least-squares slope of `y` against `0..y.len()`.
fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n as f64 - 1.0) / 2.0;
    let ym: f64 = y.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &v) in y.iter().enumerate() {
        num += (i as f64 - xm) * (v - ym);
        den += (i as f64 - xm).powi(2);
    }
    num / den
}

/// Indexed lookup into a β report (`record()` is a linear scan).
pub struct ReportIndex<'a> {
    report: &'a BetaReport,
    index: HashMap<CubeId, usize>,
}

impl<'a> ReportIndex<'a> {
    pub fn new(report: &'a BetaReport) -> Self {
        let index = report
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, i))
            .collect();
        Self { report, index }
    }
    pub fn record(&self, id: CubeId) -> &BetaRecord {
        &self.report.records[self.index[&id]]
    }
}

/// Label every atom by the density and Jones-divergence surrogates.
pub fn classify(
    system: &CubeSystem,
    mu: &DiscreteMeasure,
    report: &BetaReport,
    config: &ClassifyConfig,
) -> Result<Decomposition> {
    let levels = system.num_levels();
    if levels < 5 {
        return Err(CarnotError::InsufficientDepth(format!(
            "need depth ≥ 4 to estimate divergence, got {}",
            levels.saturating_sub(1)
        )));
    }
    let k_cap = system.k_max().max(0) as u32;
    let spec = system.spec();
    let norm = system.norm();
    let leaf_partials =
        crate::beta::jones_partials_by_leaf(report, system, mu, JonesVariant::Star, k_cap);
    let partials: Vec<Vec<f64>> = (0..mu.len())
        .map(|x| leaf_partials[system.leaf_of(x).idx].clone())
        .collect();
    let densities: Vec<f64> = crate::beta::lower_densities(spec, norm, mu, k_cap);

    // Per-level increments; shallow half sets the slope scale.
    let shallow_end = partials.first().map(|p| p.len() / 2).unwrap_or(0);
    let mut shallow_terms: Vec<f64> = Vec::new();
    for p in &partials {
        for l in 1..shallow_end {
            let t = p[l] - p[l - 1];
            if t.is_finite() {
                shallow_terms.push(t);
            }
        }
    }
    shallow_terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if shallow_terms.is_empty() {
        0.0
    } else {
        shallow_terms[shallow_terms.len() / 2]
    };
    let slope_max = config.slope_factor * median + 1e-9;

    let mut atoms = Vec::with_capacity(mu.len());
    let (mut rect_mass, mut pure_mass) = (0.0, 0.0);
    for x in 0..mu.len() {
        let p = &partials[x];
        let deep_start = p.len() - p.len() / 2;
        let slope = if p.iter().any(|v| !v.is_finite()) {
            f64::INFINITY
        } else {
            ls_slope(&p[deep_start..])
        };
        let label = if densities[x] > config.d_min && slope < slope_max {
            rect_mass += mu.weight(x);
            Label::Rect
        } else {
            pure_mass += mu.weight(x);
            Label::Pure
        };
        atoms.push(AtomRecord {
            index: x,
            weight: mu.weight(x),
            density: densities[x],
            jones_partials: p.clone(),
            slope,
            label,
        });
    }
    Ok(Decomposition { atoms, rect_mass, pure_mass, d_min: config.d_min, slope_max })
}

/// One realized witness curve with its capture statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WitnessCurve {
    pub top: CubeId,
    pub polyline: Polyline,
    /// `μ(atoms within the final cloud scale of the curve)/μ(tree leaves)`.
    pub captured_fraction: f64,
    pub leaves_mass: f64,
    /// Whether localization retained ≥ (1−ε) of the admissible mass.
    pub retention_ok: bool,
    /// Whether every selected `z_R` satisfied the ball-average bound
    /// `β̃(z_R,ℓ;diam 2B_R)^{2s} ≤ 2N·β(μ,2B_R,ℓ)^{2s}`.
    pub chebyshev_ok: bool,
    /// Certified budget `r_0 + Σ α^{2s}2^{-k}r_0` and the realized length.
    pub budget: f64,
}

/// `#{Q : R ∈ Near(Q)}` — the overlap multiplicity used in the Chebyshev
/// bound.
fn near_multiplicity(system: &CubeSystem, r: CubeId) -> usize {
    let mut n = 0;
    for l in [r.level, r.level + 1] {
        if l >= system.num_levels() {
            continue;
        }
        for idx in 0..system.level(l).len() {
            let q = CubeId { level: l, idx };
            if system.near(q).contains(&r) {
                n += 1;
            }
        }
    }
    n
}

/// Build witness curves for every maximal lower-regularity tree at density
/// threshold `c`.  The report must carry `c` in its grid.
pub fn build_witness_curves(
    system: &CubeSystem,
    mu: &DiscreteMeasure,
    ctx: &BetaContext,
    report: &BetaReport,
    config: &ClassifyConfig,
) -> Result<Vec<WitnessCurve>> {
    let spec = system.spec();
    let norm = system.norm();
    let idx = ReportIndex::new(report);
    let masses = cube_masses(system, mu)?;
    let s2 = 2.0 * spec.step() as f64;
    let beta_c = |q: CubeId| -> f64 {
        let rec = idx.record(q);
        rec.beta_star_c
            .iter()
            .find(|(cc, _)| (*cc - config.c).abs() <= 1e-12)
            .map(|(_, v)| *v)
            .unwrap_or(rec.beta_star)
    };
    let b = |q: CubeId| beta_c(q).powf(s2) * crate::beta::scale_diam(system, q);
    let mut curves = Vec::new();
    for root_idx in 0..system.level(0).len() {
        let root = CubeId { level: 0, idx: root_idx };
        // Coarsest cubes under the root passing the density test: each
        // spawns a maximal lower-regularity tree; the whole family under one
        // root is realized as a single curve.
        let passes = |q: CubeId| {
            crate::trees::mass_2b(system, mu, q) >= config.c * diam_2b(system, q)
        };
        let mut tops = Vec::new();
        let mut frontier = vec![root];
        while let Some(q) = frontier.pop() {
            if passes(q) {
                tops.push(q);
            } else if q.level + 1 < system.num_levels() {
                for &ch in &system.cube(q).children {
                    frontier.push(CubeId { level: q.level + 1, idx: ch });
                }
            }
        }
        if tops.is_empty() {
            continue;
        }
        tops.sort();
        let mut members: Vec<CubeId> = Vec::new();
        let mut leaves: Vec<usize> = Vec::new();
        let mut leaves_mass = 0.0;
        let mut retention_ok = true;
        for &top in &tops {
            let tree = density_tree(system, mu, top, config.c)?;
            if tree.is_empty() {
                continue;
            }
            let loc = localize(system, &tree, &b, mu, &masses, config.n_cap, config.eps_loc)?;
            let good = &loc.tree;
            let tree_leaves = good.leaves(system);
            let retained = mu.mass_of(
                &loc.admissible
                    .iter()
                    .copied()
                    .filter(|x| tree_leaves.contains(x))
                    .collect::<Vec<_>>(),
            );
            retention_ok &= retained >= (1.0 - config.eps_loc) * loc.admissible_mass - 1e-12;
            leaves_mass += mu.mass_of(&tree_leaves);
            leaves.extend(tree_leaves);
            members.extend(good.members().iter().copied());
        }
        if members.is_empty() {
            continue;
        }
        members.sort();
        members.dedup();
        leaves.sort_unstable();
        leaves.dedup();
        let top_level = members.iter().map(|q| q.level).min().expect("nonempty");

        // Select z_R per tree cube: the support atom of 2B_R minimizing the
        // worst tube deviation from the relevant fitted lines (its own and
        // its tree parent's), ties broken toward the cube center.
        let mut z_of: HashMap<CubeId, usize> = HashMap::new();
        let mut chebyshev_ok = true;
        for &r in &members {
            let center = system.center_point(r);
            let ball = mu.atoms_in_ball(spec, norm, center, system.rad_2b(r));
            if ball.is_empty() {
                continue;
            }
            let mut lines = vec![&idx.record(r).argmin_line];
            if let Some(pidx) = system.cube(r).parent {
                let parent = CubeId { level: r.level - 1, idx: pidx };
                if members.binary_search(&parent).is_ok() {
                    lines.push(&idx.record(parent).argmin_line);
                }
            }
            let scale = diam_2b(system, r);
            let score = |a: usize| -> f64 {
                lines
                    .iter()
                    .map(|l| stratified_power_to_line(spec, norm, &mu.point(a).0, l, scale, 64))
                    .fold(0.0f64, f64::max)
            };
            let z = ball
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    score(a)
                        .partial_cmp(&score(b))
                        .unwrap()
                        .then_with(|| {
                            norm.distance(spec, mu.point(a), center)
                                .partial_cmp(&norm.distance(spec, mu.point(b), center))
                                .unwrap()
                        })
                        .then(a.cmp(&b))
                })
                .expect("nonempty ball");
            // Chebyshev-style bound against the ball average, with the
            // measured overlap multiplicity.
            let n_mult = near_multiplicity(system, r).max(1) as f64;
            let region = crate::beta::Region::ball_2b(system, mu, r);
            for l in &lines {
                let zval = stratified_power_to_line(spec, norm, &mu.point(z).0, l, scale, 64);
                let avg = crate::beta::beta_integral_pow(spec, norm, mu, &region, l, 64);
                if zval > 2.0 * n_mult * avg + 1e-12 {
                    chebyshev_ok = false;
                }
            }
            z_of.insert(r, z);
        }

        // Clouds: per tree level below the coarsest top, a greedy maximal
        // separated subset of the z-atoms.
        let r_0 = system.side(top_level);
        let max_level = members.iter().map(|q| q.level).max().expect("nonempty");
        let mut clouds: Vec<Vec<GroupPoint>> = Vec::new();
        for (k, l) in (top_level..=max_level).enumerate() {
            let sep = r_0 * (2f64).powi(-(k as i32));
            let mut zs: Vec<usize> = members
                .iter()
                .filter(|r| r.level == l)
                .filter_map(|r| z_of.get(r).copied())
                .collect();
            zs.sort_unstable();
            zs.dedup();
            let mut chosen: Vec<GroupPoint> = Vec::new();
            for a in zs {
                let p = mu.point(a);
                if chosen.iter().all(|q| norm.distance(spec, p, q) >= sep) {
                    chosen.push(p.clone());
                }
            }
            if chosen.is_empty() {
                break;
            }
            clouds.push(chosen);
        }
        if clouds.is_empty() {
            continue;
        }
        let m = clouds.len() - 1;
        let seq = CloudSequence { c_star: 24.0, r_0, clouds };
        let coarse_top = *members.iter().find(|q| q.level == top_level).expect("nonempty");
        let extra = vec![idx.record(coarse_top).argmin_line.clone()];
        let fits = fit_cloud_lines(spec, norm, &seq, &extra)?;
        let graph = build_graphs(spec, norm, &seq, &fits, DEFAULT_EPS)?;
        let polyline = realize_curve(spec, norm, &graph)?;
        let tol = (2f64).powi(-(m as i32)) * r_0 * (1.0 + 1e-9);
        let captured: f64 = leaves
            .iter()
            .filter(|&&x| polyline.distance_to(spec, norm, mu.point(x)) <= tol)
            .map(|&x| mu.weight(x))
            .sum();
        curves.push(WitnessCurve {
            top: coarse_top,
            polyline,
            captured_fraction: if leaves_mass > 0.0 { captured / leaves_mass } else { 0.0 },
            leaves_mass,
            retention_ok,
            chebyshev_ok,
            budget: length_budget(spec, &seq, &fits),
        });
        let _ = ctx;
    }
    Ok(curves)
}

/// Summability report for the curve-side direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NecessityReport {
    /// Cumulative `Σ β*^{2s}·diam Q` over curve-meeting cubes, per level.
    pub partial_sums: Vec<f64>,
    /// Last successive ratio `S_l/S_{l−1}` (1 when already converged).
    pub final_ratio: f64,
    /// `ℋ¹(Γ) + μ(off-curve)`.
    pub comparison: f64,
    /// `S_last / comparison`.
    pub fitted_c: f64,
}

/// Evaluate the partial sums of `β*^{2s}·diam` over cubes carrying mass of
/// `curve_atoms`, against the curve length plus the off-curve mass.
pub fn necessity_check(
    system: &CubeSystem,
    mu: &DiscreteMeasure,
    report: &BetaReport,
    curve_atoms: &[usize],
    curve_length: f64,
) -> Result<NecessityReport> {
    if curve_atoms.is_empty() {
        return Err(CarnotError::EmptyInput("no curve atoms".into()));
    }
    let on: std::collections::BTreeSet<usize> = curve_atoms.iter().copied().collect();
    let idx = ReportIndex::new(report);
    let s2 = 2.0 * system.spec().step() as f64;
    let mut partial_sums = Vec::new();
    let mut acc = 0.0;
    for l in 0..system.num_levels() {
        for (ci, cube) in system.level(l).iter().enumerate() {
            if cube.members.iter().any(|a| on.contains(a)) {
                let id = CubeId { level: l, idx: ci };
                acc += idx.record(id).beta_star.powf(s2) * crate::beta::scale_diam(system, id);
            }
        }
        partial_sums.push(acc);
    }
    let n = partial_sums.len();
    let final_ratio = if n >= 2 && partial_sums[n - 2] > 0.0 {
        partial_sums[n - 1] / partial_sums[n - 2]
    } else {
        1.0
    };
    let off_mass: f64 = (0..mu.len())
        .filter(|x| !on.contains(x))
        .map(|x| mu.weight(x))
        .sum();
    let comparison = curve_length + off_mass;
    let fitted_c = partial_sums[n - 1] / comparison.max(1e-12);
    Ok(NecessityReport { partial_sums, final_ratio, comparison, fitted_c })
}

/// All maximal density trees at threshold `c` (for the pipeline-monotone
/// property: lowering `c` never shrinks the qualifying family).
pub fn density_trees(system: &CubeSystem, mu: &DiscreteMeasure, c: f64) -> Result<Vec<CubeTree>> {
    let mut out = Vec::new();
    for root_idx in 0..system.level(0).len() {
        let top = CubeId { level: 0, idx: root_idx };
        let tree = density_tree(system, mu, top, c)?;
        if !tree.is_empty() {
            out.push(tree);
        }
    }
    Ok(out)
}
