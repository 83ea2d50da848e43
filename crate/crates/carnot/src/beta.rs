//! β-numbers and Jones functions for discrete measures.
//!
//! For a measure μ, a region (cube or ball) with a scale normalizer `r`, and
//! a horizontal line `L`, the basic quantity is the μ-average
//!
//! `β(μ, region, L)^{2s} = Σ_atoms w·β̃(z, L; r)^{2s} / μ(region)`,
//!
//! where `β̃` is the stratified point-to-line distance.  On top of it:
//!
//! * `β*(μ,Q)^{2s}  = inf_L max_{R ∈ Near(Q)} β(μ,2B_R,L)^{2s}·min{1, dens R}`
//! * `β^{*,c}` — the same with only `dens R ≥ c` and factor `min{c,1}`
//!   (zero when no `R` qualifies),
//! * `β**` — the same max without the density factor,
//! * `β(μ,2B_Q)` — the plain infimum over lines of the ball average,
//!
//! with `dens R = μ(2B_R)/diam 2B_R` and the deterministic normalizer
//! `diam 2B_R = (32/3)·side R`.  The infimum over all horizontal lines is
//! realized as a minimum over a finite candidate family (atom-pair lines plus
//! a mass-weighted PCA line) with an optional descent-only refinement.
//!
//! The Jones functions sum `β^{2s}·diam Q·χ_Q(x)/μ(Q)` over the cube chain
//! of `x` with sides between 1 and the resolution `2^{-K}`; their partial
//! sums per depth feed the rectifiability classifier.
//!
//! At desk scale the `Near(Q)` reach (1568 side lengths) usually covers the
//! whole data set, so many cubes share the same `Near` family; the engine
//! caches β-evaluations per distinct family, which is what makes full
//! per-cube reports affordable.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cubes::{CubeId, CubeSystem};
use crate::error::{CarnotError, Result};
use crate::group::line::stratified_power_to_line;
use crate::group::{GroupPoint, HomogeneousNorm, HorizontalLine, StratificationSpec};
use crate::measure::DiscreteMeasure;

/// How a candidate line was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LineProvenance {
    Pair,
    PcaSeed,
    Refined,
    Fallback,
}

#[derive(Clone, Debug)]
pub struct LineCandidate {
    pub line: HorizontalLine,
    pub provenance: LineProvenance,
}

/// A finite family of horizontal lines realizing the `inf_L`.
#[derive(Clone, Debug)]
pub struct LineCandidateSet {
    pub candidates: Vec<LineCandidate>,
}

/// Atom-pair spread cap: regions with more atoms than this contribute pair
/// lines only through a farthest-point subset of this size.
const PAIR_ATOM_CAP: usize = 20;
const PAIR_SPREAD_SIZE: usize = 8;

/// Default sample count for the inner 1-D line searches of the β engine
/// (the certified window keeps this safe; the public distance operations
/// default to 512).
pub const BETA_LINE_SAMPLES: usize = 96;

/// Build the candidate family for the given atoms (indices into `mu`).
///
/// Pair lines go through each pair of atoms with distinct first-layer
/// projections (direction = first-layer displacement, base = the first atom
/// of the pair); one more line is seeded from the mass-weighted PCA of the
/// first-layer projections.  If every projection coincides, a fixed
/// direction through the common projection is used.
pub fn line_candidates(
    spec: &StratificationSpec,
    mu: &DiscreteMeasure,
    atoms: &[usize],
) -> Result<LineCandidateSet> {
    if atoms.is_empty() {
        return Err(CarnotError::EmptyInput("line candidates need at least one atom".into()));
    }
    let n1 = spec.layer_dims()[0];
    let pair_atoms: Vec<usize> = if atoms.len() <= PAIR_ATOM_CAP {
        atoms.to_vec()
    } else {
        spread_subset(spec, mu, atoms, PAIR_SPREAD_SIZE)
    };

    let mut candidates = Vec::new();
    for (a, &i) in pair_atoms.iter().enumerate() {
        for &j in &pair_atoms[a + 1..] {
            let pi = &mu.point(i).0;
            let pj = &mu.point(j).0;
            let dir: Vec<f64> = (0..n1).map(|c| pj[c] - pi[c]).collect();
            if dir.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-12 {
                let line = HorizontalLine::new(spec, mu.point(i).clone(), dir)?;
                candidates.push(LineCandidate { line, provenance: LineProvenance::Pair });
            }
        }
    }

    // Mass-weighted PCA of first-layer projections.
    let total: f64 = atoms.iter().map(|&i| mu.weight(i)).sum();
    let mut mean = vec![0.0; n1];
    for &i in atoms {
        for c in 0..n1 {
            mean[c] += mu.weight(i) * mu.point(i).0[c];
        }
    }
    for m in &mut mean {
        *m /= total;
    }
    let mut cov = vec![vec![0.0; n1]; n1];
    for &i in atoms {
        let p = &mu.point(i).0;
        for a in 0..n1 {
            for b in 0..n1 {
                cov[a][b] += mu.weight(i) * (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    let principal = power_iteration(&cov);
    if let Some(dir) = principal {
        // Base: the atom whose first-layer projection is closest to the mean.
        let base_idx = atoms
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da: f64 = (0..n1).map(|c| (mu.point(a).0[c] - mean[c]).powi(2)).sum();
                let db: f64 = (0..n1).map(|c| (mu.point(b).0[c] - mean[c]).powi(2)).sum();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .expect("nonempty");
        let line = HorizontalLine::new(spec, mu.point(base_idx).clone(), dir)?;
        candidates.push(LineCandidate { line, provenance: LineProvenance::PcaSeed });
    }

    if candidates.is_empty() {
        // All first-layer projections coincide: fixed direction e_1 through
        // the common projection.
        let mut dir = vec![0.0; n1];
        dir[0] = 1.0;
        let line = HorizontalLine::new(spec, mu.point(atoms[0]).clone(), dir)?;
        candidates.push(LineCandidate { line, provenance: LineProvenance::Fallback });
    }
    Ok(LineCandidateSet { candidates })
}

/// Deterministic farthest-point subset of the atoms (start at the lowest
/// index, repeatedly add the farthest atom).
fn spread_subset(
    spec: &StratificationSpec,
    mu: &DiscreteMeasure,
    atoms: &[usize],
    size: usize,
) -> Vec<usize> {
    let norm = HomogeneousNorm::for_spec(spec);
    let mut chosen = vec![atoms[0]];
    let mut dist: Vec<f64> = atoms
        .iter()
        .map(|&i| norm.distance(spec, mu.point(atoms[0]), mu.point(i)))
        .collect();
    while chosen.len() < size.min(atoms.len()) {
        let (mut best, mut best_d) = (usize::MAX, -1.0);
        for (slot, &d) in dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = slot;
            }
        }
        if best == usize::MAX || best_d <= 0.0 {
            break;
        }
        let new = atoms[best];
        chosen.push(new);
        for (slot, &i) in atoms.iter().enumerate() {
            let d = norm.distance(spec, mu.point(new), mu.point(i));
            if d < dist[slot] {
                dist[slot] = d;
            }
        }
    }
    chosen
}

/// Principal eigenvector of a small symmetric PSD matrix by deterministic
/// power iteration; `None` when the matrix is (numerically) zero.
fn power_iteration(m: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = m.len();
    let frob: f64 = m.iter().flat_map(|r| r.iter()).map(|x| x * x).sum();
    if frob.sqrt() <= 1e-24 {
        return None;
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    for _ in 0..200 {
        let mut w = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                w[a] += m[a][b] * v[b];
            }
        }
        let len = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len <= 1e-300 {
            return None;
        }
        for x in &mut w {
            *x /= len;
        }
        v = w;
    }
    Some(v)
}

/// A β-integration region: atom indices, scale normalizer, and mass.
#[derive(Clone, Debug)]
pub struct Region {
    pub atoms: Vec<usize>,
    pub normalizer: f64,
    pub mass: f64,
}

impl Region {
    /// Region of a cube: member atoms with the realized member diameter as
    /// normalizer (deterministic ball-diameter fallback when degenerate).
    pub fn cube(system: &CubeSystem, mu: &DiscreteMeasure, q: CubeId) -> Self {
        let atoms = system.cube(q).members.clone();
        let d = system.diam(q);
        let normalizer = if d > 0.0 { d } else { 2.0 * system.rad_2b(q) };
        let mass = mu.mass_of(&atoms);
        Self { atoms, normalizer, mass }
    }

    /// Region of the ball `2B_R` with the deterministic normalizer
    /// `(32/3)·side R`.
    pub fn ball_2b(system: &CubeSystem, mu: &DiscreteMeasure, r: CubeId) -> Self {
        let center = system.center_point(r);
        let atoms = mu.atoms_in_ball(system.spec(), system.norm(), center, system.rad_2b(r));
        let mass = mu.mass_of(&atoms);
        Self { atoms, normalizer: 2.0 * system.rad_2b(r), mass }
    }
}

/// `β(μ, region, L)^{2s}` — the exact weighted atom average (0 when the
/// region is empty).
pub fn beta_integral_pow(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    mu: &DiscreteMeasure,
    region: &Region,
    line: &HorizontalLine,
    samples: usize,
) -> f64 {
    if !(region.mass > 0.0) {
        return 0.0;
    }
    let mut acc = 0.0;
    for &i in &region.atoms {
        acc += mu.weight(i)
            * stratified_power_to_line(spec, norm, &mu.point(i).0, line, region.normalizer, samples);
    }
    acc / region.mass
}

/// `β(μ, region, L)` — the 2s-th root of [`beta_integral_pow`].
pub fn beta_integral(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    mu: &DiscreteMeasure,
    region: &Region,
    line: &HorizontalLine,
    samples: usize,
) -> f64 {
    beta_integral_pow(spec, norm, mu, region, line, samples)
        .powf(1.0 / (2.0 * spec.step() as f64))
}

/// Per-cube record of every β variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaRecord {
    pub id: CubeId,
    pub k: i32,
    pub side: f64,
    pub beta_star: f64,
    /// `(c, β^{*,c})` per grid value.
    pub beta_star_c: Vec<(f64, f64)>,
    pub beta_star_star: f64,
    /// `β(μ, 2B_Q)` — the plain ball average infimum.
    pub beta_ball: f64,
    pub argmin_line: HorizontalLine,
    pub near_count: usize,
    /// Largest density `μ(2B_R)/diam 2B_R` over `Near(Q)`.
    pub max_density: f64,
}

/// Full per-cube β report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaReport {
    pub c_grid: Vec<f64>,
    pub records: Vec<BetaRecord>,
}

impl BetaReport {
    pub fn record(&self, id: CubeId) -> &BetaRecord {
        self.records
            .iter()
            .find(|r| r.id == id)
            .expect("record exists for every cube")
    }

    /// CSV export: one row per cube.
    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![
            "level".to_string(),
            "idx".to_string(),
            "k".to_string(),
            "side".to_string(),
            "beta_star".to_string(),
            "beta_star_star".to_string(),
            "beta_ball".to_string(),
            "near_count".to_string(),
            "max_density".to_string(),
        ];
        for c in &self.c_grid {
            header.push(format!("beta_star_c_{c}"));
        }
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.id.level.to_string(),
                r.id.idx.to_string(),
                r.k.to_string(),
                r.side.to_string(),
                r.beta_star.to_string(),
                r.beta_star_star.to_string(),
                r.beta_ball.to_string(),
                r.near_count.to_string(),
                r.max_density.to_string(),
            ];
            for (_, v) in &r.beta_star_c {
                row.push(v.to_string());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Default truncation grid for `β^{*,c}` (the finite realization of the
/// countable union over density thresholds).
pub fn default_c_grid() -> Vec<f64> {
    (1..=8).map(|k| (2f64).powi(-k)).collect()
}

/// Precomputed engine state for one (system, measure) pair.
pub struct BetaContext<'a> {
    pub system: &'a CubeSystem,
    pub mu: &'a DiscreteMeasure,
    pub samples: usize,
    /// Whether to refine the best candidate line by descent.
    pub refine: bool,
    /// Atoms of `2B_R` per cube.
    ball_atoms: Vec<Vec<Vec<usize>>>,
    ball_mass: Vec<Vec<f64>>,
}

/// β values shared by every cube with the same `Near` family.
#[derive(Clone, Debug)]
struct NearFamilyBetas {
    beta_star_pow: f64,
    beta_star_c_pow: Vec<f64>,
    beta_star_star_pow: f64,
    argmin_line: HorizontalLine,
}

impl<'a> BetaContext<'a> {
    pub fn new(system: &'a CubeSystem, mu: &'a DiscreteMeasure) -> Result<Self> {
        if mu.len() != system.points().len() {
            return Err(CarnotError::InvalidArgument(
                "measure atoms must coincide with the cube system's points".into(),
            ));
        }
        let spec = system.spec();
        let norm = system.norm();
        let n1 = spec.layer_dims()[0];
        let ball_atoms: Vec<Vec<Vec<usize>>> = (0..system.num_levels())
            .map(|l| {
                // One cell grid per level (the ball radius is a function of
                // the level): candidates within gauge radius r lie within
                // first-layer radius η·r, i.e. one cell ring.
                let radius = system.rad_2b(CubeId { level: l, idx: 0 });
                let buckets = crate::cubes::HorizontalBuckets::build(
                    (0..mu.len()).map(|i| (i, mu.point(i).0.as_slice())),
                    n1,
                    norm.eta * radius,
                );
                (0..system.level(l).len())
                    .into_par_iter()
                    .map(|idx| {
                        let id = CubeId { level: l, idx };
                        let center = system.center_point(id);
                        let mut atoms: Vec<usize> = buckets
                            .within(&center.0, 1)
                            .into_iter()
                            .filter(|&i| {
                                norm.distance(spec, center, mu.point(i)) <= radius
                            })
                            .collect();
                        atoms.sort_unstable();
                        atoms
                    })
                    .collect()
            })
            .collect();
        let ball_mass = ball_atoms
            .iter()
            .map(|lv| lv.iter().map(|atoms| mu.mass_of(atoms)).collect())
            .collect();
        Ok(Self { system, mu, samples: BETA_LINE_SAMPLES, refine: true, ball_atoms, ball_mass })
    }

    fn spec(&self) -> &StratificationSpec {
        self.system.spec()
    }

    fn norm(&self) -> &HomogeneousNorm {
        self.system.norm()
    }

    fn ball_region(&self, r: CubeId) -> Region {
        Region {
            atoms: self.ball_atoms[r.level][r.idx].clone(),
            normalizer: 2.0 * self.system.rad_2b(r),
            mass: self.ball_mass[r.level][r.idx],
        }
    }

    /// `μ(2B_R)/diam 2B_R`.
    pub fn density_2b(&self, r: CubeId) -> f64 {
        self.ball_mass[r.level][r.idx] / (2.0 * self.system.rad_2b(r))
    }

    /// Evaluate all β variants for one `Near` family.
    fn eval_family(&self, near: &[CubeId], c_grid: &[f64]) -> NearFamilyBetas {
        let spec = self.spec();
        let norm = self.norm();
        let regions: Vec<Region> = near.iter().map(|&r| self.ball_region(r)).collect();
        let densities: Vec<f64> = near.iter().map(|&r| self.density_2b(r)).collect();

        // Candidate lines from the union of the family's ball atoms.
        let mut union: Vec<usize> = regions.iter().flat_map(|r| r.atoms.iter().copied()).collect();
        union.sort_unstable();
        union.dedup();
        if union.is_empty() {
            // No atoms anywhere near: every variant vanishes.
            let mut dir = vec![0.0; spec.layer_dims()[0]];
            dir[0] = 1.0;
            let line = HorizontalLine::new(spec, spec.identity(), dir).expect("unit direction");
            return NearFamilyBetas {
                beta_star_pow: 0.0,
                beta_star_c_pow: vec![0.0; c_grid.len()],
                beta_star_star_pow: 0.0,
                argmin_line: line,
            };
        }
        let candidates = line_candidates(spec, self.mu, &union).expect("nonempty atoms");

        // Evaluate regions farthest-from-centroid first: every variant is a
        // max over regions, so once a candidate's running max can no longer
        // undercut any variant's current best the remaining regions are
        // skipped.  Maxima are order-independent and exact in floating point,
        // so the result is identical to evaluating every region.
        let n1 = spec.layer_dims()[0];
        let total_w: f64 = union.iter().map(|&i| self.mu.weight(i)).sum();
        let mut centroid = vec![0.0; n1];
        for &i in &union {
            for c in 0..n1 {
                centroid[c] += self.mu.weight(i) * self.mu.point(i).0[c];
            }
        }
        for m in &mut centroid {
            *m /= total_w.max(1e-300);
        }
        let mut order: Vec<usize> = (0..regions.len()).collect();
        let key = |ri: usize| -> f64 {
            regions[ri]
                .atoms
                .first()
                .map(|&a| {
                    (0..n1)
                        .map(|c| (self.mu.point(a).0[c] - centroid[c]).powi(2))
                        .sum::<f64>()
                })
                .unwrap_or(-1.0)
        };
        order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));

        let cmin: Vec<f64> = c_grid.iter().map(|&c| c.min(1.0)).collect();
        // Incremental per-variant minima over candidates.
        let mut best_star = f64::INFINITY;
        let mut best_ss = f64::INFINITY;
        let mut best_c = vec![f64::INFINITY; c_grid.len()];
        let mut argmin: Option<HorizontalLine> = None;
        let mut scan = |line: &HorizontalLine,
                        best_star: &mut f64,
                        best_ss: &mut f64,
                        best_c: &mut [f64],
                        argmin: &mut Option<HorizontalLine>| {
            let (mut run_star, mut run_ss) = (0.0f64, 0.0f64);
            let mut run_c = vec![0.0f64; c_grid.len()];
            for &ri in &order {
                let done = run_star >= *best_star
                    && run_ss >= *best_ss
                    && run_c.iter().zip(best_c.iter()).all(|(r, b)| r >= b);
                if done {
                    return;
                }
                let v = beta_integral_pow(spec, norm, self.mu, &regions[ri], line, self.samples);
                let d = densities[ri];
                run_star = run_star.max(v * d.min(1.0));
                run_ss = run_ss.max(v);
                for (j, &c) in c_grid.iter().enumerate() {
                    if d >= c {
                        run_c[j] = run_c[j].max(v * cmin[j]);
                    }
                }
            }
            if run_star < *best_star {
                *best_star = run_star;
                *argmin = Some(line.clone());
            }
            *best_ss = (*best_ss).min(run_ss);
            for (b, r) in best_c.iter_mut().zip(&run_c) {
                *b = (*b).min(*r);
            }
        };
        for c in &candidates.candidates {
            scan(&c.line, &mut best_star, &mut best_ss, &mut best_c, &mut argmin);
        }

        // Optional descent refinement of the β*-best candidate, added back as
        // one more candidate so every variant may benefit.
        if self.refine {
            let scale = regions.iter().map(|r| r.normalizer).fold(0.0f64, f64::max);
            // Seeded by the first (full) evaluation; thereafter tracks the
            // descent's best value exactly.
            let cap = std::cell::Cell::new(f64::INFINITY);
            let objective = |line: &HorizontalLine| -> f64 {
                // β*-only early abort: a partial max at or above the best
                // value seen by the descent cannot improve it.
                let mut run = 0.0f64;
                for &ri in &order {
                    if run >= cap.get() {
                        return f64::INFINITY;
                    }
                    let v =
                        beta_integral_pow(spec, norm, self.mu, &regions[ri], line, self.samples);
                    run = run.max(v * densities[ri].min(1.0));
                }
                if run < cap.get() {
                    cap.set(run);
                }
                run
            };
            let start = argmin.clone().expect("nonempty candidates");
            let refined = refine_line(spec, &start, scale, &objective);
            scan(&refined, &mut best_star, &mut best_ss, &mut best_c, &mut argmin);
        }

        // Empty qualifying families evaluate to 0 for the truncated variant.
        let star_c_pow: Vec<f64> = best_c
            .iter()
            .map(|&b| if b.is_finite() { b } else { 0.0 })
            .collect();
        NearFamilyBetas {
            beta_star_pow: best_star,
            beta_star_c_pow: star_c_pow,
            beta_star_star_pow: best_ss,
            argmin_line: argmin.expect("nonempty candidates"),
        }
    }

    /// `β*(μ,Q)` and its minimizing line.
    pub fn beta_star(&self, q: CubeId) -> (f64, HorizontalLine) {
        let near = self.system.near(q);
        let fam = self.eval_family(&near, &[]);
        (self.root(fam.beta_star_pow), fam.argmin_line)
    }

    /// `β^{*,c}(μ,Q)`.
    pub fn beta_star_truncated(&self, q: CubeId, c: f64) -> f64 {
        let near = self.system.near(q);
        let fam = self.eval_family(&near, &[c]);
        self.root(fam.beta_star_c_pow[0])
    }

    fn root(&self, pow: f64) -> f64 {
        pow.powf(1.0 / (2.0 * self.spec().step() as f64))
    }

    /// Full per-cube report, with β evaluations cached per `Near` family.
    pub fn report(&self, c_grid: &[f64]) -> BetaReport {
        let ids = self.system.all_ids();
        // Distinct Near families.  At desk scale the reach usually covers the
        // whole data set, making Near(Q) uniform across a level; such levels
        // compute their family once instead of per cube.
        let mut family_of: Vec<usize> = Vec::with_capacity(ids.len());
        let mut families: Vec<Vec<CubeId>> = Vec::new();
        let mut index: HashMap<Vec<CubeId>, usize> = HashMap::new();
        let mut intern = |near: Vec<CubeId>, family_of: &mut Vec<usize>| {
            let slot = *index.entry(near.clone()).or_insert_with(|| {
                families.push(near);
                families.len() - 1
            });
            family_of.push(slot);
        };
        for &id in &ids {
            if self.system.near_uniform_at_level(id.level) && id.idx > 0 {
                // Same family as the level's first cube (already interned).
                let slot = family_of[family_of.len() - id.idx];
                family_of.push(slot);
            } else {
                intern(self.system.near(id), &mut family_of);
            }
        }
        let family_betas: Vec<NearFamilyBetas> = families
            .par_iter()
            .map(|near| self.eval_family(near, c_grid))
            .collect();
        let family_max_density: Vec<f64> = families
            .iter()
            .map(|near| {
                near.iter().map(|&r| self.density_2b(r)).fold(0.0f64, f64::max)
            })
            .collect();

        // The plain ball average β(μ,2B_Q) is genuinely per-cube.
        let ball_betas: Vec<f64> = ids
            .par_iter()
            .map(|&id| {
                let region = self.ball_region(id);
                if region.atoms.is_empty() {
                    return 0.0;
                }
                let cands = line_candidates(self.spec(), self.mu, &region.atoms)
                    .expect("nonempty region");
                cands
                    .candidates
                    .iter()
                    .map(|c| {
                        beta_integral_pow(
                            self.spec(),
                            self.norm(),
                            self.mu,
                            &region,
                            &c.line,
                            self.samples,
                        )
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();

        let records = ids
            .iter()
            .enumerate()
            .map(|(slot, &id)| {
                let fam = &family_betas[family_of[slot]];
                BetaRecord {
                    id,
                    k: self.system.cube(id).k,
                    side: self.system.side(id.level),
                    beta_star: self.root(fam.beta_star_pow),
                    beta_star_c: c_grid
                        .iter()
                        .zip(&fam.beta_star_c_pow)
                        .map(|(&c, &v)| (c, self.root(v)))
                        .collect(),
                    beta_star_star: self.root(fam.beta_star_star_pow),
                    beta_ball: self.root(ball_betas[slot]),
                    argmin_line: fam.argmin_line.clone(),
                    near_count: families[family_of[slot]].len(),
                    max_density: family_max_density[family_of[slot]],
                }
            })
            .collect();
        BetaReport { c_grid: c_grid.to_vec(), records }
    }
}

/// Descent-only compass search over (base offset, direction), never
/// increasing the objective.
fn refine_line(
    spec: &StratificationSpec,
    start: &HorizontalLine,
    scale: f64,
    objective: &dyn Fn(&HorizontalLine) -> f64,
) -> HorizontalLine {
    // Hard cap on objective evaluations so the descent cost per family stays
    // bounded; the refined line is an extra candidate on top of the exact
    // candidate-set minimum, so truncating the descent never invalidates the
    // reported values.
    const REFINE_EVAL_BUDGET: usize = 120;
    let mut evals = 0usize;
    let mut best = start.clone();
    let mut best_val = objective(&best);
    let n = spec.total_dim();
    let n1 = spec.layer_dims()[0];
    let mut step = 0.25 * scale.max(1e-9);
    'outer: for _ in 0..5 {
        let mut improved = true;
        while improved {
            improved = false;
            // Base offsets along each coordinate, anisotropically scaled.
            for c in 0..n {
                for sign in [-1.0, 1.0] {
                    let mut base = best.base.clone();
                    base.0[c] += sign * step;
                    if let Ok(cand) = HorizontalLine::new(spec, base, best.direction.clone()) {
                        if evals >= REFINE_EVAL_BUDGET {
                            break 'outer;
                        }
                        evals += 1;
                        let v = objective(&cand);
                        if v < best_val {
                            best_val = v;
                            best = cand;
                            improved = true;
                        }
                    }
                }
            }
            // Direction perturbations (renormalized by the constructor).
            for c in 0..n1 {
                for sign in [-1.0, 1.0] {
                    let mut dir = best.direction.clone();
                    dir[c] += sign * step / scale.max(1e-9);
                    if let Ok(cand) = HorizontalLine::new(spec, best.base.clone(), dir) {
                        if evals >= REFINE_EVAL_BUDGET {
                            break 'outer;
                        }
                        evals += 1;
                        let v = objective(&cand);
                        if v < best_val {
                            best_val = v;
                            best = cand;
                            improved = true;
                        }
                    }
                }
            }
        }
        step *= 0.5;
    }
    best
}

/// Jones-function variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JonesVariant {
    /// `b(Q) = β*(μ,Q)^{2s}·diam Q`.
    Star,
    /// `b(Q) = β^{*,c}(μ,Q)^{2s}·diam Q` for the given `c`.
    StarTruncated(f64),
    /// `b(Q) = β**(μ,Q)^{2s}·diam Q`.
    StarStar,
    /// `b(Q) = β(μ,2B_Q)^{2s}·diam Q`.
    Ball,
}

/// Diameter surrogate for cube-weighted sums: the realized member diameter,
/// floored at the cube side so sub-resolution singleton cubes still carry
/// their nominal extent.
pub fn scale_diam(system: &CubeSystem, q: CubeId) -> f64 {
    system.diam(q).max(system.side(q.level))
}

/// Partial sums of a Jones function along the cube chain of atom `x`, from
/// side 1 down to side `2^{-K}` (one entry per level, cumulative).
pub fn jones_partials(
    report: &BetaReport,
    system: &CubeSystem,
    mu: &DiscreteMeasure,
    x: usize,
    variant: JonesVariant,
    k_cap: u32,
) -> Vec<f64> {
    let s = system.spec().step() as f64;
    let mut partials = Vec::new();
    let mut acc = 0.0;
    for l in 0..system.num_levels() {
        let k = system.k_min() + l as i32;
        if k < 0 || k > k_cap as i32 {
            continue;
        }
        let q = system.cube_of_point(x, l);
        let rec = report.record(q);
        let beta = match variant {
            JonesVariant::Star => rec.beta_star,
            JonesVariant::StarTruncated(c) => rec
                .beta_star_c
                .iter()
                .find(|(cc, _)| (*cc - c).abs() <= 1e-12)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| panic!("c={c} not in the report's grid")),
            JonesVariant::StarStar => rec.beta_star_star,
            JonesVariant::Ball => rec.beta_ball,
        };
        let diam = scale_diam(system, q);
        let mass = mu.mass_of(&system.cube(q).members);
        let term = beta.powf(2.0 * s) * diam;
        if term > 0.0 {
            if mass > 0.0 {
                acc += term / mass;
            } else {
                acc = f64::INFINITY;
            }
        }
        partials.push(acc);
    }
    partials
}

/// [`jones_partials`] for every finest-level cube at once.
///
/// All atoms of one leaf share the same cube chain, so evaluating per leaf
/// (with per-cube term caching and an indexed record lookup) amortizes the
/// work that the per-atom form repeats; entry `i` is the partial-sum vector
/// of every atom whose leaf has index `i`.
pub fn jones_partials_by_leaf(
    report: &BetaReport,
    system: &CubeSystem,
    mu: &DiscreteMeasure,
    variant: JonesVariant,
    k_cap: u32,
) -> Vec<Vec<f64>> {
    let s = system.spec().step() as f64;
    let index: HashMap<CubeId, usize> =
        report.records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    // Per-cube contribution term/mass (∞ marks a massless cube with positive
    // term), matching the per-atom accumulation exactly.
    let contrib: Vec<Vec<f64>> = (0..system.num_levels())
        .map(|l| {
            (0..system.level(l).len())
                .map(|idx| {
                    let q = CubeId { level: l, idx };
                    let rec = &report.records[index[&q]];
                    let beta = match variant {
                        JonesVariant::Star => rec.beta_star,
                        JonesVariant::StarTruncated(c) => rec
                            .beta_star_c
                            .iter()
                            .find(|(cc, _)| (*cc - c).abs() <= 1e-12)
                            .map(|(_, v)| *v)
                            .unwrap_or_else(|| panic!("c={c} not in the report's grid")),
                        JonesVariant::StarStar => rec.beta_star_star,
                        JonesVariant::Ball => rec.beta_ball,
                    };
                    let diam = scale_diam(system, q);
                    let mass = mu.mass_of(&system.cube(q).members);
                    let term = beta.powf(2.0 * s) * diam;
                    if term > 0.0 {
                        if mass > 0.0 {
                            term / mass
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let finest = system.num_levels() - 1;
    (0..system.level(finest).len())
        .map(|leaf| {
            // Ancestor chain of the leaf, coarsest first.
            let mut chain = vec![0usize; system.num_levels()];
            let mut id = CubeId { level: finest, idx: leaf };
            chain[finest] = leaf;
            while id.level > 0 {
                let p = system.cube(id).parent.expect("non-root has parent");
                id = CubeId { level: id.level - 1, idx: p };
                chain[id.level] = id.idx;
            }
            let mut partials = Vec::new();
            let mut acc = 0.0;
            for (l, &idx) in chain.iter().enumerate() {
                let k = system.k_min() + l as i32;
                if k < 0 || k > k_cap as i32 {
                    continue;
                }
                let t = contrib[l][idx];
                if t > 0.0 {
                    acc += t;
                }
                partials.push(acc);
            }
            partials
        })
        .collect()
}

/// The truncated Jones function value (last partial sum; 0 when no cube of
/// side ≤ 1 exists in range).
pub fn jones(
    report: &BetaReport,
    system: &CubeSystem,
    mu: &DiscreteMeasure,
    x: usize,
    variant: JonesVariant,
    k_cap: u32,
) -> f64 {
    jones_partials(report, system, mu, x, variant, k_cap)
        .last()
        .copied()
        .unwrap_or(0.0)
}

/// Resolution-truncated lower-density surrogate:
/// `min over r ∈ {2^{-k} : 0 ≤ k ≤ K} of μ(B(x,r))/(2r)`.
pub fn lower_density(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    mu: &DiscreteMeasure,
    x: &GroupPoint,
    k_cap: u32,
) -> f64 {
    (0..=k_cap)
        .map(|k| {
            let r = (2f64).powi(-(k as i32));
            mu.ball_mass(spec, norm, x, r) / (2.0 * r)
        })
        .fold(f64::INFINITY, f64::min)
}

/// [`lower_density`] at every atom of the measure at once.
///
/// Planar abelian measures take a cell-grid path per radius: cells certified
/// entirely inside the ball contribute their precomputed mass wholesale and
/// only cells crossing the sphere are filtered atom by atom with the exact
/// predicate, so the result agrees with the per-atom form up to summation
/// order.  Other groups fall back to the per-atom evaluation.
pub fn lower_densities(
    spec: &StratificationSpec,
    norm: &HomogeneousNorm,
    mu: &DiscreteMeasure,
    k_cap: u32,
) -> Vec<f64> {
    if !(spec.step() == 1 && spec.total_dim() == 2) {
        return (0..mu.len())
            .into_par_iter()
            .map(|x| lower_density(spec, norm, mu, mu.point(x), k_cap))
            .collect();
    }
    let n = mu.len();
    let mut out = vec![f64::INFINITY; n];
    // Bounding box of the support.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..n {
        for c in 0..2 {
            lo[c] = lo[c].min(mu.point(i).0[c]);
            hi[c] = hi[c].max(mu.point(i).0[c]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    for k in 0..=k_cap {
        let r = (2f64).powi(-(k as i32));
        // Euclidean ball radius matching the gauge predicate d ≤ r.
        let re = norm.eta * r;
        // Cell width: fine enough for a thin boundary ring, capped so the
        // dense grid stays small.
        let w = (re / 32.0).max(span / 2048.0);
        let nx = ((hi[0] - lo[0]) / w).floor() as usize + 2;
        let ny = ((hi[1] - lo[1]) / w).floor() as usize + 2;
        let cell_of = |p: &[f64]| -> (usize, usize) {
            ((((p[0] - lo[0]) / w).floor() as usize).min(nx - 1),
             (((p[1] - lo[1]) / w).floor() as usize).min(ny - 1))
        };
        // CSR layout: atoms sorted by cell, plus per-cell mass.
        let mut counts = vec![0usize; nx * ny];
        let cells: Vec<usize> = (0..n)
            .map(|i| {
                let (cx, cy) = cell_of(&mu.point(i).0);
                let c = cy * nx + cx;
                counts[c] += 1;
                c
            })
            .collect();
        let mut starts = vec![0usize; nx * ny + 1];
        for c in 0..nx * ny {
            starts[c + 1] = starts[c] + counts[c];
        }
        let mut order = vec![0usize; n];
        let mut cursor = starts.clone();
        for i in 0..n {
            order[cursor[cells[i]]] = i;
            cursor[cells[i]] += 1;
        }
        let cell_mass: Vec<f64> = (0..nx * ny)
            .map(|c| order[starts[c]..starts[c + 1]].iter().map(|&i| mu.weight(i)).sum())
            .collect();
        let margin = 1e-12 * (1.0 + re);
        for x in 0..n {
            let p = &mu.point(x).0;
            let cx_lo = (((p[0] - re - lo[0]) / w).floor().max(0.0)) as usize;
            let cy_lo = (((p[1] - re - lo[1]) / w).floor().max(0.0)) as usize;
            let cx_hi = ((((p[0] + re - lo[0]) / w).floor()) as usize).min(nx - 1);
            let cy_hi = ((((p[1] + re - lo[1]) / w).floor()) as usize).min(ny - 1);
            let mut mass = 0.0;
            for cy in cy_lo..=cy_hi {
                let box_y = (lo[1] + cy as f64 * w, lo[1] + (cy + 1) as f64 * w);
                for cx in cx_lo..=cx_hi {
                    let c = cy * nx + cx;
                    if starts[c] == starts[c + 1] {
                        continue;
                    }
                    let box_x = (lo[0] + cx as f64 * w, lo[0] + (cx + 1) as f64 * w);
                    // Nearest/farthest squared Euclidean distance to the box.
                    let ax = (box_x.0 - p[0]).max(p[0] - box_x.1).max(0.0);
                    let ay = (box_y.0 - p[1]).max(p[1] - box_y.1).max(0.0);
                    let fx = (p[0] - box_x.0).abs().max((p[0] - box_x.1).abs());
                    let fy = (p[1] - box_y.0).abs().max((p[1] - box_y.1).abs());
                    let near = (ax * ax + ay * ay).sqrt();
                    let far = (fx * fx + fy * fy).sqrt();
                    if far <= re - margin {
                        mass += cell_mass[c];
                    } else if near <= re + margin {
                        for &i in &order[starts[c]..starts[c + 1]] {
                            if norm.distance(spec, mu.point(x), mu.point(i)) <= r {
                                mass += mu.weight(i);
                            }
                        }
                    }
                }
            }
            let d = mass / (2.0 * r);
            if d < out[x] {
                out[x] = d;
            }
        }
    }
    out
}
