//! Geometry of the box `⟦1, n−1⟧²`, its edge-adjacent outer boundary, and
//! discrete-harmonic utilities.
//!
//! Interior sites are indexed row-major by `(x2, x1)`: site `(x1, x2)` has
//! index `(x2 − 1)(n − 1) + (x1 − 1)`. Boundary sites are the `4(n − 1)`
//! sites of `ℤ² ∖ Λ_n` that share an edge with the interior; the four corners
//! of `⟦0, n⟧²` never touch the interior and are not part of the boundary.
//! Boundary sites are ordered row-major by `(x2, x1)` as well.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DgffError, Result};

/// Integer lattice coordinates `(x1, x2)`.
pub type Site = (i32, i32);

/// Unit steps in the fixed neighbor order `+e₁, −e₁, +e₂, −e₂`.
pub const DIRECTIONS: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// A lattice neighbor of an interior site, resolved to a dense index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Neighbor {
    Interior(usize),
    Boundary(usize),
}

impl Neighbor {
    pub fn is_boundary(self) -> bool {
        matches!(self, Neighbor::Boundary(_))
    }
}

/// The box `Λ_n = ⟦1, n−1⟧²` with its neighbor table.
#[derive(Debug, Clone)]
pub struct LatticeBox {
    n: usize,
    interior: Vec<Site>,
    boundary: Vec<Site>,
    boundary_index: HashMap<Site, usize>,
    neighbors: Vec<[Neighbor; 4]>,
}

impl LatticeBox {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(DgffError::BoxTooSmall(n));
        }
        let side = (n - 1) as i32;
        let ni = n as i32;

        let mut interior = Vec::with_capacity((n - 1) * (n - 1));
        for x2 in 1..=side {
            for x1 in 1..=side {
                interior.push((x1, x2));
            }
        }

        let mut boundary = Vec::with_capacity(4 * (n - 1));
        for x2 in 0..=ni {
            for x1 in 0..=ni {
                let on_edge = (x2 == 0 || x2 == ni) && (1..=side).contains(&x1)
                    || (x1 == 0 || x1 == ni) && (1..=side).contains(&x2);
                if on_edge {
                    boundary.push((x1, x2));
                }
            }
        }
        let boundary_index: HashMap<Site, usize> = boundary.iter().enumerate().map(|(i, &s)| (s, i)).collect();

        let mut neighbors = Vec::with_capacity(interior.len());
        for &(x1, x2) in &interior {
            let mut row = [Neighbor::Interior(0); 4];
            for (slot, (d1, d2)) in row.iter_mut().zip(DIRECTIONS) {
                let y = (x1 + d1, x2 + d2);
                *slot = if (1..=side).contains(&y.0) && (1..=side).contains(&y.1) {
                    Neighbor::Interior(((y.1 - 1) * side + (y.0 - 1)) as usize)
                } else {
                    Neighbor::Boundary(boundary_index[&y])
                };
            }
            neighbors.push(row);
        }

        Ok(Self {
            n,
            interior,
            boundary,
            boundary_index,
            neighbors,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of interior sites, `(n − 1)²`.
    pub fn len(&self) -> usize {
        self.interior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn boundary_len(&self) -> usize {
        self.boundary.len()
    }

    pub fn interior_sites(&self) -> &[Site] {
        &self.interior
    }

    pub fn boundary_sites(&self) -> &[Site] {
        &self.boundary
    }

    pub fn contains(&self, site: Site) -> bool {
        let side = (self.n - 1) as i32;
        (1..=side).contains(&site.0) && (1..=side).contains(&site.1)
    }

    pub fn index_of(&self, site: Site) -> Result<usize> {
        if !self.contains(site) {
            return Err(DgffError::NotInterior(site));
        }
        let side = (self.n - 1) as i32;
        Ok(((site.1 - 1) * side + (site.0 - 1)) as usize)
    }

    pub fn site(&self, index: usize) -> Site {
        self.interior[index]
    }

    pub fn boundary_index_of(&self, site: Site) -> Option<usize> {
        self.boundary_index.get(&site).copied()
    }

    pub fn boundary_site(&self, index: usize) -> Site {
        self.boundary[index]
    }

    /// Neighbor table entry for the interior site with dense index `index`.
    #[inline]
    pub fn neighbor_slots(&self, index: usize) -> &[Neighbor; 4] {
        &self.neighbors[index]
    }

    /// The four lattice neighbors of an interior site in the order
    /// `+e₁, −e₁, +e₂, −e₂`.
    pub fn neighbors(&self, site: Site) -> Result<[Site; 4]> {
        self.index_of(site)?;
        Ok(DIRECTIONS.map(|(d1, d2)| (site.0 + d1, site.1 + d2)))
    }

    /// Graph distance from an interior site to the boundary.
    pub fn distance_to_boundary(&self, index: usize) -> usize {
        let (x1, x2) = self.interior[index];
        let n = self.n as i32;
        x1.min(x2).min(n - x1).min(n - x2) as usize
    }

    /// Index of the site closest to the geometric center.
    pub fn center_index(&self) -> usize {
        let c = (self.n / 2) as i32;
        self.index_of((c, c)).expect("center lies in the interior")
    }

    /// Sum of `field` over the neighbors of interior site `index`, with
    /// boundary neighbors read from `boundary`.
    #[inline]
    pub fn neighbor_sum(&self, index: usize, field: &[f64], boundary: &[f64]) -> f64 {
        let mut sum = 0.0;
        for nb in &self.neighbors[index] {
            sum += match *nb {
                Neighbor::Interior(j) => field[j],
                Neighbor::Boundary(b) => boundary[b],
            };
        }
        sum
    }

    /// Applies the killed-walk transition operator: `(P f)(x) = ¼ Σ_{y∼x} f(y)`
    /// with zero boundary values.
    pub fn apply_transition(&self, f: &[f64], out: &mut [f64]) {
        for (x, row) in self.neighbors.iter().enumerate() {
            let mut s = 0.0;
            for nb in row {
                if let Neighbor::Interior(j) = *nb {
                    s += f[j];
                }
            }
            out[x] = 0.25 * s;
        }
    }
}

/// A real-valued surface on the interior together with fixed boundary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightField {
    n: usize,
    pub values: Vec<f64>,
    pub boundary: Vec<f64>,
}

impl HeightField {
    pub fn zeros(bx: &LatticeBox) -> Self {
        Self::constant(bx, 0.0)
    }

    pub fn constant(bx: &LatticeBox, c: f64) -> Self {
        Self {
            n: bx.n(),
            values: vec![c; bx.len()],
            boundary: vec![0.0; bx.boundary_len()],
        }
    }

    pub fn from_values(bx: &LatticeBox, values: Vec<f64>) -> Result<Self> {
        if values.len() != bx.len() {
            return Err(DgffError::ShapeMismatch {
                expected: bx.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DgffError::NonFinite("height field"));
        }
        Ok(Self {
            n: bx.n(),
            values,
            boundary: vec![0.0; bx.boundary_len()],
        })
    }

    pub fn with_boundary(mut self, boundary: Vec<f64>) -> Result<Self> {
        if boundary.len() != self.boundary.len() {
            return Err(DgffError::ShapeMismatch {
                expected: self.boundary.len(),
                got: boundary.len(),
            });
        }
        if boundary.iter().any(|v| !v.is_finite()) {
            return Err(DgffError::NonFinite("boundary data"));
        }
        self.boundary = boundary;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn check_box(&self, bx: &LatticeBox) -> Result<()> {
        if self.n != bx.n() || self.values.len() != bx.len() {
            return Err(DgffError::ShapeMismatch {
                expected: bx.len(),
                got: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn get(&self, bx: &LatticeBox, site: Site) -> Result<f64> {
        Ok(self.values[bx.index_of(site)?])
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Pointwise sum of interior values; boundary data is added as well.
    pub fn add(&self, other: &HeightField) -> HeightField {
        HeightField {
            n: self.n,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            boundary: self.boundary.iter().zip(&other.boundary).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Residual tolerance of the conjugate-gradient harmonic solver.
pub const HARMONIC_TOL: f64 = 1e-12;

/// Discrete harmonic extension of boundary data `eta`: the field equal to
/// `eta` on the boundary whose interior values equal the average of their four
/// neighbors.
pub fn harmonic_extension(bx: &LatticeBox, eta: &[f64]) -> Result<HeightField> {
    if eta.len() != bx.boundary_len() {
        return Err(DgffError::ShapeMismatch {
            expected: bx.boundary_len(),
            got: eta.len(),
        });
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(DgffError::NonFinite("boundary data"));
    }
    // (I − P) f = ¼ Σ_{boundary nbrs} η
    let zeros = vec![0.0; bx.len()];
    let rhs: Vec<f64> = (0..bx.len()).map(|x| 0.25 * bx.neighbor_sum(x, &zeros, eta)).collect();
    let scale = eta.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let values = solve_dirichlet(bx, &rhs, HARMONIC_TOL * scale)?;
    HeightField::from_values(bx, values)?.with_boundary(eta.to_vec())
}

/// Solves `(I − P) u = rhs` by conjugate gradients; `I − P` is symmetric
/// positive definite on the interior.
pub fn solve_dirichlet(bx: &LatticeBox, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
    let m = bx.len();
    let apply = |v: &[f64], out: &mut [f64], tmp: &mut [f64]| {
        bx.apply_transition(v, tmp);
        for i in 0..m {
            out[i] = v[i] - tmp[i];
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut u = vec![0.0; m];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    let mut rr = dot(&r, &r);
    // the conditioning of I − P grows like n², so allow a generous budget
    let max_iter = 20 * m + 100;
    for _ in 0..max_iter {
        if rr.sqrt() <= tol {
            break;
        }
        apply(&p, &mut ap, &mut tmp);
        let alpha = rr / dot(&p, &ap);
        for i in 0..m {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    // recompute the true residual so round-off in the recurrence cannot hide
    apply(&u, &mut ap, &mut tmp);
    let resid = rhs.iter().zip(&ap).map(|(b, a)| (b - a) * (b - a)).sum::<f64>().sqrt();
    if !resid.is_finite() || resid > tol.max(1e-14) * 1e3 {
        return Err(DgffError::Numerical(format!(
            "conjugate gradient stalled at residual {resid:e}"
        )));
    }
    Ok(u)
}

/// Largest violation of the mean-value property `f(x) = ¼ Σ_{y∼x} f(y)` over
/// interior sites.
pub fn harmonic_residual(bx: &LatticeBox, field: &HeightField) -> f64 {
    (0..bx.len())
        .map(|x| (field.values[x] - 0.25 * bx.neighbor_sum(x, &field.values, &field.boundary)).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_box() {
        let bx = LatticeBox::new(2).unwrap();
        assert_eq!(bx.interior_sites(), &[(1, 1)]);
        assert_eq!(bx.boundary_len(), 4);
        assert!(bx.neighbor_slots(0).iter().all(|nb| nb.is_boundary()));
    }

    #[test]
    fn site_counts() {
        let b3 = LatticeBox::new(3).unwrap();
        assert_eq!((b3.len(), b3.boundary_len()), (4, 8));
        let b64 = LatticeBox::new(64).unwrap();
        assert_eq!((b64.len(), b64.boundary_len()), (3969, 252));
    }

    #[test]
    fn rejects_degenerate_box() {
        assert_eq!(LatticeBox::new(1).unwrap_err(), DgffError::BoxTooSmall(1));
        assert_eq!(LatticeBox::new(0).unwrap_err(), DgffError::BoxTooSmall(0));
    }

    #[test]
    fn neighbor_examples() {
        let b4 = LatticeBox::new(4).unwrap();
        let x = b4.index_of((2, 2)).unwrap();
        assert!(b4.neighbor_slots(x).iter().all(|nb| !nb.is_boundary()));
        assert_eq!(b4.neighbors((2, 2)).unwrap(), [(3, 2), (1, 2), (2, 3), (2, 1)]);

        let b3 = LatticeBox::new(3).unwrap();
        let x = b3.index_of((1, 1)).unwrap();
        let nb = b3.neighbor_slots(x);
        assert_eq!(nb.iter().filter(|n| n.is_boundary()).count(), 2);
        assert_eq!(nb[0], Neighbor::Interior(b3.index_of((2, 1)).unwrap()));
    }

    #[test]
    fn neighbors_rejects_boundary_site() {
        let bx = LatticeBox::new(4).unwrap();
        assert_eq!(bx.neighbors((0, 2)).unwrap_err(), DgffError::NotInterior((0, 2)));
        assert!(bx.index_of((4, 1)).is_err());
    }

    #[test]
    fn boundary_excludes_corners() {
        let bx = LatticeBox::new(5).unwrap();
        for corner in [(0, 0), (0, 5), (5, 0), (5, 5)] {
            assert!(bx.boundary_index_of(corner).is_none());
        }
        for &b in bx.boundary_sites() {
            assert!(!bx.contains(b));
            let touches = DIRECTIONS.iter().any(|(d1, d2)| bx.contains((b.0 + d1, b.1 + d2)));
            assert!(touches, "{b:?} has no interior neighbor");
        }
    }

    #[test]
    fn constant_extension() {
        let bx = LatticeBox::new(9).unwrap();
        let f = harmonic_extension(&bx, &vec![5.0; bx.boundary_len()]).unwrap();
        assert!(f.values.iter().all(|v| (v - 5.0).abs() < 1e-10));
    }

    #[test]
    fn coordinate_extension() {
        let bx = LatticeBox::new(12).unwrap();
        let eta: Vec<f64> = bx.boundary_sites().iter().map(|s| s.0 as f64).collect();
        let f = harmonic_extension(&bx, &eta).unwrap();
        for (x, v) in f.values.iter().enumerate() {
            assert!((v - bx.site(x).0 as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn one_site_extension_is_boundary_mean() {
        let bx = LatticeBox::new(2).unwrap();
        let eta = vec![1.0, -2.0, 4.5, 0.5];
        let f = harmonic_extension(&bx, &eta).unwrap();
        assert!((f.values[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_finite_boundary_rejected() {
        let bx = LatticeBox::new(3).unwrap();
        let mut eta = vec![0.0; 8];
        eta[3] = f64::NAN;
        assert!(matches!(harmonic_extension(&bx, &eta), Err(DgffError::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn index_maps_are_inverse(n in 2usize..40) {
            let bx = LatticeBox::new(n).unwrap();
            for i in 0..bx.len() {
                prop_assert_eq!(bx.index_of(bx.site(i)).unwrap(), i);
            }
            for (j, &b) in bx.boundary_sites().iter().enumerate() {
                prop_assert_eq!(bx.boundary_index_of(b), Some(j));
            }
        }

        #[test]
        fn neighbor_symmetry(n in 2usize..30) {
            let bx = LatticeBox::new(n).unwrap();
            for x in 0..bx.len() {
                for nb in bx.neighbor_slots(x) {
                    if let Neighbor::Interior(y) = *nb {
                        prop_assert!(bx.neighbor_slots(y).contains(&Neighbor::Interior(x)));
                    }
                }
            }
        }

        #[test]
        fn extension_is_harmonic_and_bounded(
            n in 2usize..20,
            seed in proptest::collection::vec(-50.0f64..50.0, 76),
        ) {
            let bx = LatticeBox::new(n).unwrap();
            let eta: Vec<f64> = (0..bx.boundary_len()).map(|i| seed[i % seed.len()] * ((i % 7) as f64 - 3.0) / 3.0).collect();
            let f = harmonic_extension(&bx, &eta).unwrap();
            prop_assert!(harmonic_residual(&bx, &f) < 1e-10);
            let lo = eta.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in &f.values {
                prop_assert!(*v >= lo - 1e-10 && *v <= hi + 1e-10);
            }
        }
    }
}
