//! Trees of cubes, leaves, normalized sum functions, the localization lemma,
//! and lower-regularity (density) trees.
//!
//! A tree is a set of cubes of one [`CubeSystem`] with a unique maximal
//! element `Top` that is upward closed: if `Q` is in the tree and
//! `Q ⊂ P ⊂ Top` then `P` is in the tree.  All trees are truncated at the
//! measure's resolution depth; `Leaves` is realized on atoms as the
//! intersection over levels of the union of level cubes.

use std::collections::BTreeSet;

use crate::cubes::{CubeId, CubeSystem};
use crate::error::{CarnotError, Result};
use crate::measure::DiscreteMeasure;

/// Per-cube masses `μ(Q)` of a measure whose atoms are the system's points.
pub type CubeMasses = Vec<Vec<f64>>;

/// Compute `μ(Q)` for every cube. The measure's atoms must be the system's
/// point list (same indexing).
pub fn cube_masses(system: &CubeSystem, mu: &DiscreteMeasure) -> Result<CubeMasses> {
    if mu.len() != system.points().len() {
        return Err(CarnotError::InvalidArgument(
            "measure atoms must coincide with the cube system's points".into(),
        ));
    }
    Ok((0..system.num_levels())
        .map(|l| {
            system
                .level(l)
                .iter()
                .map(|c| mu.mass_of(&c.members))
                .collect()
        })
        .collect())
}

/// Mass of the ball `2B_Q = B(x_Q, (16/3)·side Q)` over the measure's atoms.
pub fn mass_2b(system: &CubeSystem, mu: &DiscreteMeasure, q: CubeId) -> f64 {
    let center = system.center_point(q);
    mu.ball_mass(system.spec(), system.norm(), center, system.rad_2b(q))
}

/// Deterministic diameter of the ball `2B_Q`: `(32/3)·side Q` (twice the
/// radius), independent of the realized atoms.
pub fn diam_2b(system: &CubeSystem, q: CubeId) -> f64 {
    2.0 * system.rad_2b(q)
}

/// A tree of cubes.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeTree {
    top: CubeId,
    /// Members including `top`; empty set = the empty tree.
    members: BTreeSet<CubeId>,
}

impl CubeTree {
    /// Validate and build a tree: every member must reach `top` through
    /// members only (upward closure), and `top` itself must be a member
    /// unless the set is empty.
    pub fn new(system: &CubeSystem, top: CubeId, members: BTreeSet<CubeId>) -> Result<Self> {
        if !members.is_empty() {
            if !members.contains(&top) {
                return Err(CarnotError::InvalidArgument(
                    "nonempty tree must contain its top".into(),
                ));
            }
            for &q in &members {
                if q.level < top.level {
                    return Err(CarnotError::InvalidArgument(
                        "tree member above its top".into(),
                    ));
                }
                if q != top {
                    let parent = parent_id(system, q).ok_or_else(|| {
                        CarnotError::InvalidArgument("tree member outside top's closure".into())
                    })?;
                    if !members.contains(&parent) {
                        return Err(CarnotError::InvalidArgument(format!(
                            "tree not upward closed at {q:?}"
                        )));
                    }
                }
            }
        }
        Ok(Self { top, members })
    }

    /// The full tree of all descendants of `top` down to the system's depth.
    pub fn full(system: &CubeSystem, top: CubeId) -> Self {
        let mut members = BTreeSet::new();
        let mut frontier = vec![top];
        while let Some(q) = frontier.pop() {
            members.insert(q);
            if q.level + 1 < system.num_levels() {
                for &c in &system.cube(q).children {
                    frontier.push(CubeId { level: q.level + 1, idx: c });
                }
            }
        }
        Self { top, members }
    }

    /// Upward closure of an arbitrary cube set towards `top` (cubes outside
    /// `top`'s closure are dropped).
    pub fn close_upward(system: &CubeSystem, top: CubeId, seed: &BTreeSet<CubeId>) -> Self {
        let mut members = BTreeSet::new();
        for &q in seed {
            // Walk the ancestor chain; keep the branch only if it reaches top.
            let mut chain = vec![q];
            let mut cur = q;
            let reached = loop {
                if cur == top {
                    break true;
                }
                match parent_id(system, cur) {
                    Some(p) if p.level >= top.level => {
                        chain.push(p);
                        cur = p;
                    }
                    _ => break false,
                }
            };
            if reached {
                members.extend(chain);
            }
        }
        Self { top, members }
    }

    pub fn top(&self) -> CubeId {
        self.top
    }

    pub fn members(&self) -> &BTreeSet<CubeId> {
        &self.members
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, q: CubeId) -> bool {
        self.members.contains(&q)
    }

    /// Deepest level index present in the tree.
    pub fn max_level(&self) -> Option<usize> {
        self.members.iter().map(|q| q.level).max()
    }

    /// Atoms of the leaves: atoms whose whole ancestor chain from the deepest
    /// tree level up to `top` lies in the tree.
    pub fn leaves(&self, system: &CubeSystem) -> Vec<usize> {
        let Some(deepest) = self.max_level() else {
            return Vec::new();
        };
        let top_members = &system.cube(self.top).members;
        top_members
            .iter()
            .copied()
            .filter(|&x| {
                (self.top.level..=deepest)
                    .all(|l| self.contains(system.cube_of_point(x, l)))
            })
            .collect()
    }

    /// Oracle form of [`Self::leaves`]: intersection over levels of the union
    /// of level-cube member sets, realized on atoms.
    pub fn leaves_by_level_intersection(&self, system: &CubeSystem) -> Vec<usize> {
        let Some(deepest) = self.max_level() else {
            return Vec::new();
        };
        let mut current: BTreeSet<usize> =
            system.cube(self.top).members.iter().copied().collect();
        for l in self.top.level..=deepest {
            let mut level_union: BTreeSet<usize> = BTreeSet::new();
            for &q in self.members.iter().filter(|q| q.level == l) {
                level_union.extend(system.cube(q).members.iter().copied());
            }
            current = current.intersection(&level_union).copied().collect();
        }
        current.into_iter().collect()
    }
}

fn parent_id(system: &CubeSystem, q: CubeId) -> Option<CubeId> {
    system
        .cube(q)
        .parent
        .map(|p| CubeId { level: q.level - 1, idx: p })
}

/// The normalized sum function
/// `S(x) = Σ_{Q ∈ tree} b(Q)·χ_Q(x) / μ(Q)`, with `0/0 = 0` and `c/0 = ∞`
/// for `c > 0`.  `x` is an atom index; only the ancestor chain of its leaf
/// cube can contribute.
pub fn sum_function(
    system: &CubeSystem,
    tree: &CubeTree,
    b: &dyn Fn(CubeId) -> f64,
    masses: &CubeMasses,
    x: usize,
) -> f64 {
    let Some(deepest) = tree.max_level() else {
        return 0.0;
    };
    let mut acc = 0.0;
    for l in tree.top.level..=deepest.min(system.num_levels() - 1) {
        let q = system.cube_of_point(x, l);
        if !tree.contains(q) {
            continue;
        }
        let bq = b(q);
        let mq = masses[q.level][q.idx];
        if bq > 0.0 {
            if mq > 0.0 {
                acc += bq / mq;
            } else {
                return f64::INFINITY;
            }
        }
    }
    acc
}

/// Output of [`localize`].
#[derive(Clone, Debug)]
pub struct Localization {
    /// The good subtree.
    pub tree: CubeTree,
    /// Atom indices of the admissible set `A = {x ∈ Leaves : S(x) ≤ N}`.
    pub admissible: Vec<usize>,
    /// `μ(A)`.
    pub admissible_mass: f64,
    /// Cubes removed as (contained in) bad cubes.
    pub bad: Vec<CubeId>,
}

/// The localization lemma: prune every cube contained in some `R` with
/// `μ(A∩R) ≤ (ε·μ(A)/μ(Top))·μ(R)`, where `A` is the set of leaf atoms with
/// sum function ≤ `n_cap`.
///
/// Guarantees (asserted by the test suite on discrete instances):
/// the output is a tree with the same top; `μ(A ∩ Leaves) ≥ (1−ε)·μ(A)`;
/// and `Σ_{Q good} b(Q) < (n_cap/ε)·μ(Top)`.
pub fn localize(
    system: &CubeSystem,
    tree: &CubeTree,
    b: &dyn Fn(CubeId) -> f64,
    mu: &DiscreteMeasure,
    masses: &CubeMasses,
    n_cap: f64,
    eps: f64,
) -> Result<Localization> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CarnotError::InvalidArgument(format!("eps must be in (0,1), got {eps}")));
    }
    if tree.is_empty() {
        return Err(CarnotError::LocalizationRejected("empty input tree".into()));
    }
    let leaves = tree.leaves(system);
    let admissible: Vec<usize> = leaves
        .into_iter()
        .filter(|&x| sum_function(system, tree, b, masses, x) <= n_cap)
        .collect();
    let a_mass = mu.mass_of(&admissible);
    if !(a_mass > 0.0) {
        return Err(CarnotError::LocalizationRejected(
            "admissible set has zero mass (no leaf atom with sum ≤ N)".into(),
        ));
    }
    let top_mass = masses[tree.top.level][tree.top.idx];
    let threshold = eps * a_mass / top_mass;

    // Mass of A inside each tree cube.
    let in_a = {
        let mut v = vec![false; mu.len()];
        for &x in &admissible {
            v[x] = true;
        }
        v
    };
    let a_mass_in = |q: CubeId| -> f64 {
        system
            .cube(q)
            .members
            .iter()
            .filter(|&&m| in_a[m])
            .map(|&m| mu.weight(m))
            .sum()
    };

    let bad_roots: BTreeSet<CubeId> = tree
        .members()
        .iter()
        .copied()
        .filter(|&r| a_mass_in(r) <= threshold * masses[r.level][r.idx])
        .collect();

    // Remove every cube contained in a bad cube (descend from bad roots).
    let mut removed: BTreeSet<CubeId> = BTreeSet::new();
    for &r in &bad_roots {
        let mut frontier = vec![r];
        while let Some(q) = frontier.pop() {
            if !removed.insert(q) {
                continue;
            }
            if q.level + 1 < system.num_levels() {
                for &c in &system.cube(q).children {
                    let child = CubeId { level: q.level + 1, idx: c };
                    if tree.contains(child) {
                        frontier.push(child);
                    }
                }
            }
        }
    }
    let good: BTreeSet<CubeId> =
        tree.members().iter().copied().filter(|q| !removed.contains(q)).collect();
    let good_tree = CubeTree::new(system, tree.top, good)?;
    Ok(Localization {
        tree: good_tree,
        admissible,
        admissible_mass: a_mass,
        bad: removed.into_iter().collect(),
    })
}

/// The lower-regularity tree under `top`: cubes `Q ⊆ top` such that every
/// `R` with `Q ⊆ R ⊆ top` satisfies `μ(2B_R) ≥ c·diam 2B_R`.  May be empty
/// (when `top` itself fails).
pub fn density_tree(
    system: &CubeSystem,
    mu: &DiscreteMeasure,
    top: CubeId,
    c: f64,
) -> Result<CubeTree> {
    if !(c > 0.0) {
        return Err(CarnotError::InvalidArgument(format!("c must be positive, got {c}")));
    }
    let passes = |q: CubeId| mass_2b(system, mu, q) >= c * diam_2b(system, q);
    let mut members = BTreeSet::new();
    if passes(top) {
        let mut frontier = vec![top];
        while let Some(q) = frontier.pop() {
            members.insert(q);
            if q.level + 1 < system.num_levels() {
                for &ch in &system.cube(q).children {
                    let child = CubeId { level: q.level + 1, idx: ch };
                    if passes(child) {
                        frontier.push(child);
                    }
                }
            }
        }
    }
    CubeTree::new(system, top, members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{GroupPoint, HomogeneousNorm, StratificationSpec};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Uniform grid measure on [0,1] with n atoms, cube system to depth k.
    fn line_setup(n: usize, depth: i32) -> (CubeSystem, DiscreteMeasure) {
        let g = StratificationSpec::abelian(1);
        let nm = HomogeneousNorm::for_spec(&g);
        let pts: Vec<GroupPoint> =
            (0..n).map(|i| GroupPoint(vec![(i as f64 + 0.5) / n as f64])).collect();
        let mu = DiscreteMeasure::uniform(pts.clone(), 1.0, depth as u32).unwrap();
        let sys = CubeSystem::build(&g, &nm, pts, 0, depth).unwrap();
        (sys, mu)
    }

    fn root(sys: &CubeSystem) -> CubeId {
        assert_eq!(sys.level(0).len(), 1);
        CubeId { level: 0, idx: 0 }
    }

    #[test]
    fn full_tree_leaves_are_all_atoms() {
        let (sys, _) = line_setup(64, 5);
        let tree = CubeTree::full(&sys, root(&sys));
        let mut leaves = tree.leaves(&sys);
        leaves.sort_unstable();
        assert_eq!(leaves, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn pruned_tree_leaves_are_the_kept_branch() {
        let (sys, _) = line_setup(64, 5);
        let top = root(&sys);
        // Keep only the branch through the first child.
        let first_child = CubeId { level: 1, idx: sys.cube(top).children[0] };
        let sub = CubeTree::full(&sys, first_child);
        let mut members: BTreeSet<CubeId> = sub.members().clone();
        members.insert(top);
        let tree = CubeTree::new(&sys, top, members).unwrap();
        let mut leaves = tree.leaves(&sys);
        leaves.sort_unstable();
        let mut expected = sys.cube(first_child).members.clone();
        expected.sort_unstable();
        assert_eq!(leaves, expected);
    }

    #[test]
    fn leaves_equal_level_intersection_on_random_prunings() {
        let (sys, _) = line_setup(96, 5);
        let top = root(&sys);
        let full = CubeTree::full(&sys, top);
        let all: Vec<CubeId> = full.members().iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let seed: BTreeSet<CubeId> =
                all.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
            let tree = CubeTree::close_upward(&sys, top, &seed);
            let mut a = tree.leaves(&sys);
            let mut b = tree.leaves_by_level_intersection(&sys);
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sum_function_conventions() {
        let (sys, mu) = line_setup(32, 4);
        let masses = cube_masses(&sys, &mu).unwrap();
        let top = root(&sys);
        let tree = CubeTree::full(&sys, top);
        // b ≡ 0 → 0.
        assert_eq!(sum_function(&sys, &tree, &|_| 0.0, &masses, 3), 0.0);
        // Single-cube tree with b = 2, μ(Top) = 1 total: S = 2.
        let single = CubeTree::new(&sys, top, BTreeSet::from([top])).unwrap();
        let s = sum_function(&sys, &single, &|_| 2.0, &masses, 0);
        assert!((s - 2.0 / mu.total_mass()).abs() <= 1e-12);
    }

    #[test]
    fn sum_function_tonelli_identity() {
        // ∫_A S dμ = Σ_Q b(Q)·μ(A∩Q)/μ(Q) on random instances.
        let (sys, mu) = line_setup(48, 4);
        let masses = cube_masses(&sys, &mu).unwrap();
        let top = root(&sys);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let full = CubeTree::full(&sys, top);
            let bvals: std::collections::BTreeMap<CubeId, f64> = full
                .members()
                .iter()
                .map(|&q| (q, rng.random_range(0.0..2.0)))
                .collect();
            let b = |q: CubeId| bvals.get(&q).copied().unwrap_or(0.0);
            let a: Vec<usize> = (0..mu.len()).filter(|_| rng.random_bool(0.5)).collect();
            let lhs: f64 = a
                .iter()
                .map(|&x| mu.weight(x) * sum_function(&sys, &full, &b, &masses, x))
                .sum();
            let in_a = {
                let mut v = vec![false; mu.len()];
                for &x in &a {
                    v[x] = true;
                }
                v
            };
            let rhs: f64 = full
                .members()
                .iter()
                .map(|&q| {
                    let ma: f64 = sys
                        .cube(q)
                        .members
                        .iter()
                        .filter(|&&m| in_a[m])
                        .map(|&m| mu.weight(m))
                        .sum();
                    if masses[q.level][q.idx] > 0.0 {
                        b(q) * ma / masses[q.level][q.idx]
                    } else {
                        0.0
                    }
                })
                .sum();
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn sum_function_monotone_under_tree_growth() {
        let (sys, mu) = line_setup(48, 4);
        let masses = cube_masses(&sys, &mu).unwrap();
        let top = root(&sys);
        let full = CubeTree::full(&sys, top);
        let all: Vec<CubeId> = full.members().iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seed: BTreeSet<CubeId> =
            all.iter().copied().filter(|_| rng.random_bool(0.4)).collect();
        let small = CubeTree::close_upward(&sys, top, &seed);
        let b = |q: CubeId| (q.level + 1) as f64 * 0.1;
        for x in 0..mu.len() {
            let s_small = sum_function(&sys, &small, &b, &masses, x);
            let s_full = sum_function(&sys, &full, &b, &masses, x);
            assert!(s_small <= s_full + 1e-12);
        }
    }

    /// Check the three localization conclusions exactly on an instance.
    fn assert_localization_conclusions(
        sys: &CubeSystem,
        tree: &CubeTree,
        b: &dyn Fn(CubeId) -> f64,
        mu: &DiscreteMeasure,
        n_cap: f64,
        eps: f64,
    ) {
        let masses = cube_masses(sys, mu).unwrap();
        let loc = match localize(sys, tree, b, mu, &masses, n_cap, eps) {
            Ok(l) => l,
            Err(CarnotError::LocalizationRejected(_)) => return,
            Err(e) => panic!("unexpected error: {e}"),
        };
        // (1) the output is a tree with the same top (validated by CubeTree::new).
        assert_eq!(loc.tree.top(), tree.top());
        assert!(!loc.tree.is_empty(), "top is never bad");
        // (2) retention of admissible mass in the good leaves.
        let good_leaves: BTreeSet<usize> = loc.tree.leaves(sys).into_iter().collect();
        let retained: f64 = loc
            .admissible
            .iter()
            .filter(|x| good_leaves.contains(x))
            .map(|&x| mu.weight(x))
            .sum();
        assert!(
            retained >= (1.0 - eps) * loc.admissible_mass - 1e-12,
            "retention {retained} < (1-{eps})·{}",
            loc.admissible_mass
        );
        // (3) the good-tree b-sum is controlled by (N/ε)·μ(Top).
        let total_b: f64 = loc.tree.members().iter().map(|&q| b(q)).sum();
        let top_mass = masses[tree.top().level][tree.top().idx];
        assert!(
            total_b < n_cap / eps * top_mass + 1e-9,
            "Σb = {total_b} vs bound {}",
            n_cap / eps * top_mass
        );
    }

    #[test]
    fn localization_no_bad_cubes_is_identity() {
        let (sys, mu) = line_setup(64, 4);
        let masses = cube_masses(&sys, &mu).unwrap();
        let tree = CubeTree::full(&sys, root(&sys));
        // b small and uniform: every atom admissible, no cube bad.
        let b = |_: CubeId| 1e-6;
        let loc = localize(&sys, &tree, &b, &mu, &masses, 1.0, 0.5).unwrap();
        assert_eq!(loc.tree.members(), tree.members());
        assert_localization_conclusions(&sys, &tree, &b, &mu, 1.0, 0.5);
    }

    #[test]
    fn localization_adversarial_heavy_branch() {
        // Three-level binary system over 8 atoms: one branch carries huge b,
        // making its atoms inadmissible; that branch must be pruned and the
        // pruned A-mass stays ≤ ε·μ(A).
        let (sys, mu) = line_setup(8, 3);
        let tree = CubeTree::full(&sys, root(&sys));
        let heavy = CubeId { level: 1, idx: sys.cube(root(&sys)).children[0] };
        let b = move |q: CubeId| if q == heavy { 100.0 } else { 0.0 };
        assert_localization_conclusions(&sys, &tree, &b, &mu, 1.0, 0.25);
        // The heavy cube's atoms are inadmissible (S = 100/μ > 1), so the
        // heavy cube has zero A-mass and must be pruned.
        let masses = cube_masses(&sys, &mu).unwrap();
        let loc = localize(&sys, &tree, &b, &mu, &masses, 1.0, 0.25).unwrap();
        assert!(!loc.tree.contains(heavy));
    }

    #[test]
    fn localization_randomized_instances() {
        let (sys, mu) = line_setup(64, 5);
        let tree = CubeTree::full(&sys, root(&sys));
        let all: Vec<CubeId> = tree.members().iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let bvals: std::collections::BTreeMap<CubeId, f64> = all
                .iter()
                .map(|&q| {
                    let v = if rng.random_bool(0.2) {
                        rng.random_range(0.0..3.0)
                    } else {
                        rng.random_range(0.0..0.02)
                    };
                    (q, v)
                })
                .collect();
            let b = move |q: CubeId| bvals.get(&q).copied().unwrap_or(0.0);
            let n_cap = rng.random_range(0.5..4.0);
            let eps = rng.random_range(0.05..0.95);
            assert_localization_conclusions(&sys, &tree, &b, &mu, n_cap, eps);
        }
    }

    #[test]
    fn density_tree_hereditary_and_monotone() {
        let (sys, mu) = line_setup(128, 6);
        let top = root(&sys);
        // Tiny c: the full tree; huge c: empty below top or fully empty.
        let t_small = density_tree(&sys, &mu, top, 1e-9).unwrap();
        assert_eq!(t_small.members().len(), CubeTree::full(&sys, top).members().len());
        let t_huge = density_tree(&sys, &mu, top, 1e9).unwrap();
        assert!(t_huge.is_empty() || t_huge.members().len() == 1);
        // Hereditary + inclusion-monotone in c.
        let t1 = density_tree(&sys, &mu, top, 0.05).unwrap();
        let t2 = density_tree(&sys, &mu, top, 0.02).unwrap();
        for &q in t1.members() {
            if q != top {
                let p = CubeId { level: q.level - 1, idx: sys.cube(q).parent.unwrap() };
                assert!(t1.contains(p), "hereditary violated");
            }
            assert!(t2.contains(q), "monotonicity in c violated");
        }
    }
}
