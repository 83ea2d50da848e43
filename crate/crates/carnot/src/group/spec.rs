//! Stratification data, group points, and the polynomial group law.

use serde::{Deserialize, Serialize};

use crate::error::{CarnotError, Result};

/// One structure constant `[X_i, X_j] = … + c·X_k + …`.
///
/// Indices are 1-based (matching the usual basis labels `X_1, …, X_N`); the
/// table stores only entries with `i < j`, and antisymmetry supplies the rest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketEntry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub c: f64,
}

/// A point of the group in exponential coordinates: a flat vector of length
/// `total_dim`, grouped by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPoint(pub Vec<f64>);

impl GroupPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Euclidean norm of the raw coordinate vector.
    pub fn euclid_norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

/// The stratification of a step-`s` Carnot group: layer dimensions and Lie
/// structure constants, with derived index tables.
///
/// Construction validates the grading (a bracket of layer `i` with layer `j`
/// lands only in layer `i + j`, and vanishes beyond layer `s`), antisymmetry
/// (by normal form `i < j`), and the Jacobi identity on all basis triples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StratificationSpec {
    /// Nilpotency step `s` (number of layers). Multiplication supports `s ≤ 3`.
    step: usize,
    /// `n_1, …, n_s`.
    layer_dims: Vec<usize>,
    /// Start offset of each layer in the flat coordinate vector.
    layer_offsets: Vec<usize>,
    /// `N = Σ n_i`.
    total_dim: usize,
    /// `q = Σ k·n_k`.
    homogeneous_dim: usize,
    /// 1-based layer number of each basis index (0-based position).
    layer_of: Vec<usize>,
    /// Normalized bracket table, `i < j`, 0-based indices.
    brackets: Vec<(usize, usize, usize, f64)>,
    /// Optional preset tag ("abelian:n", "h1", "h2", "engel", …).
    name: Option<String>,
}

/// JSON document form of a group definition: `{step, layer_dims, brackets}`
/// with 1-based bracket indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupDocument {
    pub step: usize,
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub brackets: Vec<BracketEntry>,
    #[serde(default)]
    pub name: Option<String>,
}

impl StratificationSpec {
    /// Build and validate a stratification from layer dimensions and 1-based
    /// structure constants.
    pub fn new(layer_dims: &[usize], brackets: &[BracketEntry]) -> Result<Self> {
        Self::with_name(layer_dims, brackets, None)
    }

    fn with_name(
        layer_dims: &[usize],
        brackets: &[BracketEntry],
        name: Option<String>,
    ) -> Result<Self> {
        if layer_dims.is_empty() || layer_dims.contains(&0) {
            return Err(CarnotError::InvalidStratification(
                "layer dimensions must be nonempty positive integers".into(),
            ));
        }
        let step = layer_dims.len();
        let total_dim: usize = layer_dims.iter().sum();
        let mut layer_offsets = Vec::with_capacity(step);
        let mut layer_of = Vec::with_capacity(total_dim);
        let mut off = 0;
        for (layer, &n) in layer_dims.iter().enumerate() {
            layer_offsets.push(off);
            off += n;
            for _ in 0..n {
                layer_of.push(layer + 1);
            }
        }
        let homogeneous_dim = layer_dims.iter().enumerate().map(|(l, &n)| (l + 1) * n).sum();

        // Normalize brackets to i < j with 0-based indices, merging duplicates.
        let mut table: Vec<(usize, usize, usize, f64)> = Vec::new();
        for e in brackets {
            if e.i == 0 || e.j == 0 || e.k == 0 || e.i > total_dim || e.j > total_dim || e.k > total_dim {
                return Err(CarnotError::InvalidStratification(format!(
                    "bracket entry indices out of range: [{}, {}] -> {}",
                    e.i, e.j, e.k
                )));
            }
            if e.i == e.j {
                return Err(CarnotError::InvalidStratification(format!(
                    "bracket [X_{0}, X_{0}] must vanish",
                    e.i
                )));
            }
            let (i, j, c) = if e.i < e.j {
                (e.i - 1, e.j - 1, e.c)
            } else {
                (e.j - 1, e.i - 1, -e.c)
            };
            let k = e.k - 1;
            if layer_of[k] != layer_of[i] + layer_of[j] {
                return Err(CarnotError::InvalidStratification(format!(
                    "grading violated: [layer {}, layer {}] entry lands in layer {}",
                    layer_of[i], layer_of[j], layer_of[k]
                )));
            }
            if let Some(slot) = table.iter_mut().find(|t| t.0 == i && t.1 == j && t.2 == k) {
                slot.3 += c;
            } else {
                table.push((i, j, k, c));
            }
        }
        table.retain(|t| t.3 != 0.0);
        table.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

        let spec = Self {
            step,
            layer_dims: layer_dims.to_vec(),
            layer_offsets,
            total_dim,
            homogeneous_dim,
            layer_of,
            brackets: table,
            name,
        };
        spec.check_jacobi()?;
        Ok(spec)
    }

    /// Jacobi identity on all basis triples, checked once at construction.
    fn check_jacobi(&self) -> Result<()> {
        let n = self.total_dim;
        let mut basis = vec![0.0; n];
        for a in 0..n {
            for b in (a + 1)..n {
                for c in 0..n {
                    let mut sum = vec![0.0; n];
                    for (x, y, z) in [(a, b, c), (b, c, a), (c, a, b)] {
                        basis.iter_mut().for_each(|v| *v = 0.0);
                        basis[x] = 1.0;
                        let mut e_y = vec![0.0; n];
                        e_y[y] = 1.0;
                        let inner = self.bracket(&basis, &e_y);
                        let mut e_z = vec![0.0; n];
                        e_z[z] = 1.0;
                        let outer = self.bracket(&inner, &e_z);
                        for (s, o) in sum.iter_mut().zip(&outer) {
                            *s += o;
                        }
                    }
                    if sum.iter().any(|v| v.abs() > 1e-12) {
                        return Err(CarnotError::InvalidStratification(format!(
                            "Jacobi identity fails on basis triple ({}, {}, {})",
                            a + 1,
                            b + 1,
                            c + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Presets
    // ------------------------------------------------------------------

    /// Abelian group ℝⁿ (step 1; multiplication is vector addition).
    pub fn abelian(n: usize) -> Self {
        Self::with_name(&[n], &[], Some(format!("abelian:{n}")))
            .expect("abelian preset is always valid")
    }

    /// The m-th Heisenberg group: layers `(2m, 1)` with
    /// `[X_i, X_{m+i}] = X_{2m+1}` for `i = 1..m`.
    pub fn heisenberg(m: usize) -> Self {
        assert!(m >= 1, "heisenberg preset needs m >= 1");
        let brackets: Vec<BracketEntry> = (1..=m)
            .map(|i| BracketEntry { i, j: m + i, k: 2 * m + 1, c: 1.0 })
            .collect();
        Self::with_name(&[2 * m, 1], &brackets, Some(format!("h{m}")))
            .expect("heisenberg preset is always valid")
    }

    /// The Engel group: layers `(2, 1, 1)` with `[X_1, X_2] = X_3` and
    /// `[X_1, X_3] = X_4`.
    pub fn engel() -> Self {
        let brackets = [
            BracketEntry { i: 1, j: 2, k: 3, c: 1.0 },
            BracketEntry { i: 1, j: 3, k: 4, c: 1.0 },
        ];
        Self::with_name(&[2, 1, 1], &brackets, Some("engel".into()))
            .expect("engel preset is always valid")
    }

    /// Load a group from its JSON document form.
    pub fn from_document(doc: &GroupDocument) -> Result<Self> {
        Self::with_name(&doc.layer_dims, &doc.brackets, doc.name.clone())
    }

    pub fn to_document(&self) -> GroupDocument {
        GroupDocument {
            step: self.step,
            layer_dims: self.layer_dims.clone(),
            brackets: self
                .brackets
                .iter()
                .map(|&(i, j, k, c)| BracketEntry { i: i + 1, j: j + 1, k: k + 1, c })
                .collect(),
            name: self.name.clone(),
        }
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn homogeneous_dim(&self) -> usize {
        self.homogeneous_dim
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    /// Start offset of 1-based layer `i` in the flat coordinate vector.
    pub fn layer_offset(&self, i: usize) -> usize {
        self.layer_offsets[i - 1]
    }

    /// Dimension of the quotient group `G_i` (the first `i` layers).
    pub fn quotient_dim(&self, i: usize) -> usize {
        self.layer_offsets[i - 1] + self.layer_dims[i - 1]
    }

    /// First-layer slice of a coordinate vector.
    pub fn layer1<'a>(&self, coords: &'a [f64]) -> &'a [f64] {
        &coords[..self.layer_dims[0]]
    }

    pub fn identity(&self) -> GroupPoint {
        GroupPoint(vec![0.0; self.total_dim])
    }

    fn check_point(&self, p: &GroupPoint) -> Result<()> {
        if p.dim() != self.total_dim {
            return Err(CarnotError::SpecMismatch { expected: self.total_dim, got: p.dim() });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Lie bracket and the group law
    // ------------------------------------------------------------------

    /// Lie bracket of two coordinate vectors via the structure constants:
    /// `[u, v]_k = Σ c_{ij}^k (u_i v_j − u_j v_i)`.
    pub fn bracket(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total_dim];
        for &(i, j, k, c) in &self.brackets {
            out[k] += c * (u[i] * v[j] - u[j] * v[i]);
        }
        out
    }

    /// Group product in exponential coordinates: the BCH polynomial
    /// `a·b = a + b + ½[a,b] + 1/12([a,[a,b]] − [b,[a,b]])`, which is exact
    /// for nilpotency step ≤ 3 (all higher series terms vanish).
    pub fn multiply(&self, a: &GroupPoint, b: &GroupPoint) -> Result<GroupPoint> {
        self.check_point(a)?;
        self.check_point(b)?;
        if self.step > 3 {
            return Err(CarnotError::UnsupportedStep(self.step));
        }
        Ok(GroupPoint(self.multiply_raw(&a.0, &b.0)))
    }

    /// Unchecked product on raw coordinate slices (hot path).
    pub(crate) fn multiply_raw(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
        if self.step >= 2 && !self.brackets.is_empty() {
            let ab = self.bracket(a, b);
            for (zi, abi) in z.iter_mut().zip(&ab) {
                *zi += 0.5 * abi;
            }
            if self.step >= 3 {
                let a_ab = self.bracket(a, &ab);
                let b_ab = self.bracket(b, &ab);
                for ((zi, x), y) in z.iter_mut().zip(&a_ab).zip(&b_ab) {
                    *zi += (x - y) / 12.0;
                }
            }
        }
        z
    }

    /// Group inverse: coordinate negation.
    pub fn inverse(&self, a: &GroupPoint) -> Result<GroupPoint> {
        self.check_point(a)?;
        Ok(GroupPoint(a.0.iter().map(|x| -x).collect()))
    }

    pub(crate) fn inverse_raw(&self, a: &[f64]) -> Vec<f64> {
        a.iter().map(|x| -x).collect()
    }

    /// `a⁻¹·b` on raw slices (the displacement used by left-invariant
    /// distances).
    pub(crate) fn displacement_raw(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let inv = self.inverse_raw(a);
        self.multiply_raw(&inv, b)
    }

    /// Anisotropic dilation `δ_t(x) = (t·x_1, t²·x_2, …, t^s·x_s)`.
    pub fn dilate(&self, t: f64, a: &GroupPoint) -> Result<GroupPoint> {
        self.check_point(a)?;
        if !(t > 0.0) {
            return Err(CarnotError::InvalidArgument(format!(
                "dilation parameter must be positive, got {t}"
            )));
        }
        Ok(GroupPoint(self.dilate_raw(t, &a.0)))
    }

    pub(crate) fn dilate_raw(&self, t: f64, a: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(a.len());
        for (idx, &x) in a.iter().enumerate() {
            out.push(x * t.powi(self.layer_of[idx] as i32));
        }
        out
    }

    /// Left translation of `p` by `g`.
    pub fn left_translate(&self, g: &GroupPoint, p: &GroupPoint) -> Result<GroupPoint> {
        self.multiply(g, p)
    }

    // ------------------------------------------------------------------
    // Layer projections / quotients
    // ------------------------------------------------------------------

    /// Projection onto the quotient group `G_i`: truncation to the first `i`
    /// layers.  This is a group homomorphism because the BCH polynomial of
    /// layer `k` depends only on layers `< k`.
    pub fn project_layer(&self, a: &GroupPoint, i: usize) -> Result<GroupPoint> {
        self.check_point(a)?;
        if i == 0 || i > self.step {
            return Err(CarnotError::InvalidArgument(format!(
                "layer index {i} out of range 1..={}",
                self.step
            )));
        }
        Ok(GroupPoint(a.0[..self.quotient_dim(i)].to_vec()))
    }

    /// The stratification of the quotient group `G_i`.
    pub fn quotient_spec(&self, i: usize) -> Result<Self> {
        if i == 0 || i > self.step {
            return Err(CarnotError::InvalidArgument(format!(
                "layer index {i} out of range 1..={}",
                self.step
            )));
        }
        let dims = &self.layer_dims[..i];
        let qdim = self.quotient_dim(i);
        let brackets: Vec<BracketEntry> = self
            .brackets
            .iter()
            .filter(|&&(a, b, k, _)| a < qdim && b < qdim && k < qdim)
            .map(|&(a, b, k, c)| BracketEntry { i: a + 1, j: b + 1, k: k + 1, c })
            .collect();
        Self::new(dims, &brackets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_point(spec: &StratificationSpec, rng: &mut impl Rng) -> GroupPoint {
        GroupPoint((0..spec.total_dim()).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    /// Independent oracle: the closed-form product of the first Heisenberg
    /// group, `(x,y,z)·(x',y',z') = (x+x', y+y', z+z'+½(xy'−yx'))`.
    fn h1_product(a: &[f64], b: &[f64]) -> Vec<f64> {
        vec![
            a[0] + b[0],
            a[1] + b[1],
            a[2] + b[2] + 0.5 * (a[0] * b[1] - a[1] * b[0]),
        ]
    }

    /// Independent oracle: the closed-form product of the Engel group with
    /// `[X_1,X_2]=X_3`, `[X_1,X_3]=X_4`, derived by expanding the degree-≤3
    /// BCH terms by hand.
    fn engel_product(a: &[f64], b: &[f64]) -> Vec<f64> {
        let c3 = a[0] * b[1] - a[1] * b[0];
        vec![
            a[0] + b[0],
            a[1] + b[1],
            a[2] + b[2] + 0.5 * c3,
            a[3] + b[3] + 0.5 * (a[0] * b[2] - a[2] * b[0]) + (a[0] - b[0]) * c3 / 12.0,
        ]
    }

    #[test]
    fn abelian_multiplication_is_addition() {
        let g = StratificationSpec::abelian(2);
        let p = g
            .multiply(&GroupPoint(vec![1.0, 2.0]), &GroupPoint(vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(p.0, vec![4.0, 6.0]);
    }

    #[test]
    fn h1_unit_commutator_example() {
        let g = StratificationSpec::heisenberg(1);
        let p = g
            .multiply(&GroupPoint(vec![1.0, 0.0, 0.0]), &GroupPoint(vec![0.0, 1.0, 0.0]))
            .unwrap();
        assert_eq!(p.0, vec![1.0, 1.0, 0.5]);
    }

    #[test]
    fn generic_bch_matches_h1_closed_form() {
        let g = StratificationSpec::heisenberg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let a = random_point(&g, &mut rng);
            let b = random_point(&g, &mut rng);
            let p = g.multiply(&a, &b).unwrap();
            let q = h1_product(&a.0, &b.0);
            for (x, y) in p.0.iter().zip(&q) {
                assert!((x - y).abs() <= 1e-12, "{:?} vs {:?}", p.0, q);
            }
        }
    }

    #[test]
    fn generic_bch_matches_engel_closed_form() {
        let g = StratificationSpec::engel();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let a = random_point(&g, &mut rng);
            let b = random_point(&g, &mut rng);
            let p = g.multiply(&a, &b).unwrap();
            let q = engel_product(&a.0, &b.0);
            for (x, y) in p.0.iter().zip(&q) {
                assert!((x - y).abs() <= 1e-12, "{:?} vs {:?}", p.0, q);
            }
        }
    }

    #[test]
    fn inverse_cancels() {
        for g in [
            StratificationSpec::abelian(3),
            StratificationSpec::heisenberg(1),
            StratificationSpec::heisenberg(2),
            StratificationSpec::engel(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..1000 {
                let a = random_point(&g, &mut rng);
                let inv = g.inverse(&a).unwrap();
                let p = g.multiply(&a, &inv).unwrap();
                assert!(p.0.iter().all(|x| x.abs() <= 1e-12), "{:?}", p.0);
            }
        }
    }

    #[test]
    fn associativity_on_random_triples() {
        for g in [
            StratificationSpec::heisenberg(1),
            StratificationSpec::heisenberg(2),
            StratificationSpec::engel(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            for _ in 0..2000 {
                let a = random_point(&g, &mut rng);
                let b = random_point(&g, &mut rng);
                let c = random_point(&g, &mut rng);
                let lhs = g.multiply(&g.multiply(&a, &b).unwrap(), &c).unwrap();
                let rhs = g.multiply(&a, &g.multiply(&b, &c).unwrap()).unwrap();
                let scale: f64 = 1.0 + lhs.0.iter().map(|x| x.abs()).sum::<f64>();
                for (x, y) in lhs.0.iter().zip(&rhs.0) {
                    assert!((x - y).abs() <= 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn dilation_example_and_semigroup() {
        let g = StratificationSpec::heisenberg(1);
        let p = g.dilate(2.0, &GroupPoint(vec![1.0, 0.0, 1.0])).unwrap();
        assert_eq!(p.0, vec![2.0, 0.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_point(&g, &mut rng);
            let (t, u) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
            let lhs = g.dilate(u, &g.dilate(t, &a).unwrap()).unwrap();
            let rhs = g.dilate(u * t, &a).unwrap();
            for (x, y) in lhs.0.iter().zip(&rhs.0) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn dilation_is_a_homomorphism() {
        let g = StratificationSpec::engel();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let a = random_point(&g, &mut rng);
            let b = random_point(&g, &mut rng);
            let t = rng.random_range(0.2..2.0);
            let lhs = g.dilate(t, &g.multiply(&a, &b).unwrap()).unwrap();
            let rhs = g
                .multiply(&g.dilate(t, &a).unwrap(), &g.dilate(t, &b).unwrap())
                .unwrap();
            for (x, y) in lhs.0.iter().zip(&rhs.0) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn projection_is_homomorphism_and_truncation() {
        let g = StratificationSpec::engel();
        let q2 = g.quotient_spec(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let a = random_point(&g, &mut rng);
            let b = random_point(&g, &mut rng);
            let lhs = g.project_layer(&g.multiply(&a, &b).unwrap(), 2).unwrap();
            let rhs = q2
                .multiply(&g.project_layer(&a, 2).unwrap(), &g.project_layer(&b, 2).unwrap())
                .unwrap();
            for (x, y) in lhs.0.iter().zip(&rhs.0) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
        // π_s is the identity; π_1 of a Heisenberg point is its planar part.
        let h = StratificationSpec::heisenberg(1);
        let p = GroupPoint(vec![1.0, 2.0, 7.0]);
        assert_eq!(h.project_layer(&p, 2).unwrap(), p);
        assert_eq!(h.project_layer(&p, 1).unwrap().0, vec![1.0, 2.0]);
    }

    #[test]
    fn grading_rejects_bad_brackets() {
        // A first-layer bracket landing in the first layer violates grading.
        let bad = [BracketEntry { i: 1, j: 2, k: 1, c: 1.0 }];
        assert!(StratificationSpec::new(&[2, 1], &bad).is_err());
    }

    #[test]
    fn document_roundtrip() {
        let g = StratificationSpec::engel();
        let doc = g.to_document();
        let text = serde_json::to_string(&doc).unwrap();
        let back: GroupDocument = serde_json::from_str(&text).unwrap();
        let g2 = StratificationSpec::from_document(&back).unwrap();
        assert_eq!(g.layer_dims(), g2.layer_dims());
        assert_eq!(g.brackets, g2.brackets);
    }
}
