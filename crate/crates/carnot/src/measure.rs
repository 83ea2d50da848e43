//! Finite atomic measures with a declared resolution scale.

use serde::{Deserialize, Serialize};

use crate::error::{CarnotError, Result};
use crate::group::{GroupPoint, HomogeneousNorm, StratificationSpec};

/// One weighted atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: GroupPoint,
    pub weight: f64,
}

/// A finitely supported measure: weighted atoms plus the resolution exponent
/// `K` — the smallest scale `2^{-K}` at which the measure is trusted.  All
/// truncated sums, trees, and density surrogates stop at that scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
    resolution: u32,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Atom>, resolution: u32) -> Result<Self> {
        if atoms.is_empty() {
            return Err(CarnotError::EmptyInput("measure needs at least one atom".into()));
        }
        for a in &atoms {
            if !(a.weight > 0.0 && a.weight.is_finite()) {
                return Err(CarnotError::InvalidArgument(format!(
                    "atom weights must be positive and finite, got {}",
                    a.weight
                )));
            }
            if !a.point.is_finite() {
                return Err(CarnotError::InvalidArgument("atom coordinates must be finite".into()));
            }
        }
        Ok(Self { atoms, resolution })
    }

    /// Equal-weight measure of total mass `total` on the given points.
    pub fn uniform(points: Vec<GroupPoint>, total: f64, resolution: u32) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(CarnotError::EmptyInput("measure needs at least one atom".into()));
        }
        let w = total / n as f64;
        Self::new(points.into_iter().map(|point| Atom { point, weight: w }).collect(), resolution)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn weight(&self, idx: usize) -> f64 {
        self.atoms[idx].weight
    }

    pub fn point(&self, idx: usize) -> &GroupPoint {
        &self.atoms[idx].point
    }

    pub fn points(&self) -> Vec<GroupPoint> {
        self.atoms.iter().map(|a| a.point.clone()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// Mass of a subset of atoms given by index.
    pub fn mass_of(&self, indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.atoms[i].weight).sum()
    }

    /// Mass of the closed ball `B(x, r)`.
    pub fn ball_mass(
        &self,
        spec: &StratificationSpec,
        norm: &HomogeneousNorm,
        x: &GroupPoint,
        r: f64,
    ) -> f64 {
        self.atoms
            .iter()
            .filter(|a| norm.distance(spec, x, &a.point) <= r)
            .map(|a| a.weight)
            .sum()
    }

    /// Indices of atoms in the closed ball `B(x, r)`.
    pub fn atoms_in_ball(
        &self,
        spec: &StratificationSpec,
        norm: &HomogeneousNorm,
        x: &GroupPoint,
        r: f64,
    ) -> Vec<usize> {
        (0..self.atoms.len())
            .filter(|&i| norm.distance(spec, x, &self.atoms[i].point) <= r)
            .collect()
    }
}
