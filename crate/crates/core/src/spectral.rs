//! Closed-form eigen-data of the Dirichlet Laplacian on the box, the Green's
//! function of the killed walk, and analytic predictions derived from them.
//!
//! With `φ_i(k) = √(2/n) sin(kiπ/n)` and `λ_i = 1 − cos(iπ/n)`, the products
//! `φ_𝐢(x) = φ_{i₁}(x₁) φ_{i₂}(x₂)` form an orthonormal eigenbasis of
//! `−Δ = I − P` with eigenvalues `λ_𝐢 = (λ_{i₁} + λ_{i₂}) / 2`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{DgffError, Result};
use crate::lattice::{LatticeBox, Neighbor, Site};

/// Largest side for which the dense Green's matrix is materialized.
pub const DENSE_GREENS_MAX_N: usize = 48;

/// One-dimensional eigenvalue `1 − cos(iπ/n)`.
#[inline]
pub fn lambda_1d(n: usize, i: usize) -> f64 {
    1.0 - (i as f64 * PI / n as f64).cos()
}

/// One-dimensional eigenvector entry `√(2/n) sin(kiπ/n)`.
#[inline]
pub fn phi_1d(n: usize, i: usize, k: i32) -> f64 {
    (2.0 / n as f64).sqrt() * (k as f64 * i as f64 * PI / n as f64).sin()
}

/// Principal eigenvalue `λ₁ = 1 − cos(π/n)`.
pub fn lambda_1(n: usize) -> f64 {
    lambda_1d(n, 1)
}

fn check_index(n: usize, idx: (usize, usize)) -> Result<()> {
    let ok = |i: usize| (1..n).contains(&i);
    if n < 2 {
        return Err(DgffError::BoxTooSmall(n));
    }
    if !ok(idx.0) || !ok(idx.1) {
        return Err(DgffError::EigenIndexOutOfRange(idx.0, idx.1, n));
    }
    Ok(())
}

/// Eigenvalue of the product mode `𝐢 = (i₁, i₂)`.
pub fn eigenvalue(n: usize, idx: (usize, usize)) -> Result<f64> {
    check_index(n, idx)?;
    Ok(0.5 * (lambda_1d(n, idx.0) + lambda_1d(n, idx.1)))
}

/// Eigenvalue and unit-norm eigenvector of mode `𝐢`, in site order.
pub fn eigenpair(bx: &LatticeBox, idx: (usize, usize)) -> Result<(f64, Vec<f64>)> {
    let n = bx.n();
    let lambda = eigenvalue(n, idx)?;
    let phi = bx
        .interior_sites()
        .iter()
        .map(|&(x1, x2)| phi_1d(n, idx.0, x1) * phi_1d(n, idx.1, x2))
        .collect();
    Ok((lambda, phi))
}

/// The principal eigenvector `φ₁`.
pub fn phi_1(bx: &LatticeBox) -> Vec<f64> {
    eigenpair(bx, (1, 1)).expect("(1,1) is a valid mode").1
}

/// `⟨φ₁, 𝟙⟩ = (2/n) cot²(π/(2n))`.
pub fn phi_1_mass(n: usize) -> f64 {
    let c = 1.0 / (PI / (2.0 * n as f64)).tan();
    2.0 / n as f64 * c * c
}

/// `φ̂₁ = φ₁ · ⟨φ₁, 𝟙⟩`, the leading-order survival profile.
pub fn phi_hat_1(bx: &LatticeBox) -> Vec<f64> {
    let mass = phi_1_mass(bx.n());
    phi_1(bx).into_iter().map(|v| v * mass).collect()
}

/// Summary of the spectrum of one box.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralData {
    pub n: usize,
    /// `(i₁, i₂, λ_𝐢)` in row-major mode order.
    pub eigenvalues: Vec<(usize, usize, f64)>,
    pub lambda_1: f64,
    pub phi_1: Vec<f64>,
    pub phi_hat_1: Vec<f64>,
}

impl SpectralData {
    pub fn new(bx: &LatticeBox) -> Self {
        let n = bx.n();
        let mut eigenvalues = Vec::with_capacity(bx.len());
        for i2 in 1..n {
            for i1 in 1..n {
                eigenvalues.push((i1, i2, 0.5 * (lambda_1d(n, i1) + lambda_1d(n, i2))));
            }
        }
        Self {
            n,
            eigenvalues,
            lambda_1: lambda_1(n),
            phi_1: phi_1(bx),
            phi_hat_1: phi_hat_1(bx),
        }
    }
}

/// Dense matrix of the one-dimensional sine basis: `S[(i−1, k−1)] = φ_i(k)`.
pub fn sine_basis(n: usize) -> DMatrix<f64> {
    let m = n - 1;
    DMatrix::from_fn(m, m, |i, k| phi_1d(n, i + 1, k as i32 + 1))
}

/// Dense killed-walk transition matrix `P(x, y) = ¼ 1{x ∼ y}` on the interior.
pub fn transition_matrix(bx: &LatticeBox) -> DMatrix<f64> {
    let m = bx.len();
    let mut p = DMatrix::zeros(m, m);
    for x in 0..m {
        for nb in bx.neighbor_slots(x) {
            if let Neighbor::Interior(y) = *nb {
                p[(x, y)] += 0.25;
            }
        }
    }
    p
}

/// Dense matrix of `−Δ = I − P`.
pub fn laplacian_matrix(bx: &LatticeBox) -> DMatrix<f64> {
    DMatrix::identity(bx.len(), bx.len()) - transition_matrix(bx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreensMethod {
    /// `G = Σ_𝐢 λ_𝐢⁻¹ φ_𝐢 φ_𝐢ᵀ`.
    Fourier,
    /// Cholesky solve of `(I − P) G = I`.
    LinearSolve,
}

/// Green's function of the walk killed on the boundary; also the covariance
/// of the free field.
#[derive(Debug, Clone)]
pub struct GreensMatrix {
    n: usize,
    matrix: DMatrix<f64>,
}

impl GreensMatrix {
    pub fn new(bx: &LatticeBox, method: GreensMethod) -> Result<Self> {
        let n = bx.n();
        if n > DENSE_GREENS_MAX_N {
            return Err(DgffError::TooLargeForDense(n));
        }
        let matrix = match method {
            GreensMethod::Fourier => {
                let m = bx.len();
                // column (i₁, i₂) of `modes` is φ_𝐢 / √λ_𝐢
                let s = sine_basis(n);
                let mut modes = DMatrix::zeros(m, m);
                for i2 in 0..n - 1 {
                    for i1 in 0..n - 1 {
                        let col = i2 * (n - 1) + i1;
                        let w = 1.0 / (0.5 * (lambda_1d(n, i1 + 1) + lambda_1d(n, i2 + 1))).sqrt();
                        for x2 in 0..n - 1 {
                            for x1 in 0..n - 1 {
                                modes[(x2 * (n - 1) + x1, col)] = w * s[(i1, x1)] * s[(i2, x2)];
                            }
                        }
                    }
                }
                &modes * modes.transpose()
            }
            GreensMethod::LinearSolve => {
                let chol = laplacian_matrix(bx)
                    .cholesky()
                    .ok_or_else(|| DgffError::Numerical("I − P is not positive definite".into()))?;
                chol.inverse()
            }
        };
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(DgffError::NonFinite("Green's matrix"));
        }
        Ok(Self { n, matrix })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.matrix[(x, y)]
    }

    pub fn max_abs_diff(&self, other: &GreensMatrix) -> f64 {
        (&self.matrix - &other.matrix).amax()
    }
}

/// Column `G(·, y)` by an iterative solve; usable at any `n`.
pub fn greens_column(bx: &LatticeBox, y: usize) -> Result<Vec<f64>> {
    let mut e = vec![0.0; bx.len()];
    e[y] = 1.0;
    crate::lattice::solve_dirichlet(bx, &e, 1e-12)
}

/// Leading-order survival probability `φ̂₁(x) e^{−λ₁ t}` clamped to `[0, 1]`.
/// Meaningful only once `t ≫ n²`.
pub fn survival_prediction(bx: &LatticeBox, x: Site, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(DgffError::InvalidParameter(format!("t must be ≥ 0 (got {t})")));
    }
    bx.index_of(x)?;
    let n = bx.n();
    let phi_hat = phi_1d(n, 1, x.0) * phi_1d(n, 1, x.1) * phi_1_mass(n);
    Ok((phi_hat * (-lambda_1(n) * t).exp()).clamp(0.0, 1.0))
}

/// Cutoff location `(2/π²) n² log a` for initial height scale `a > 1`.
pub fn t_star(n: f64, a: f64) -> Result<f64> {
    if !(a > 1.0) || !n.is_finite() || n <= 0.0 {
        return Err(DgffError::InvalidParameter(format!(
            "t_star needs a > 1 and n > 0 (got n = {n}, a = {a})"
        )));
    }
    Ok(2.0 / (PI * PI) * n * n * a.ln())
}

/// `e^{−t(I − P)} f`, the continuous-time killed-walk semigroup, evaluated by
/// uniformization: `Σ_k Pois(t; k) P^k f`.
pub fn heat_semigroup(bx: &LatticeBox, f: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(DgffError::InvalidParameter(format!(
            "t must be finite and ≥ 0 (got {t})"
        )));
    }
    if f.len() != bx.len() {
        return Err(DgffError::ShapeMismatch {
            expected: bx.len(),
            got: f.len(),
        });
    }
    if t == 0.0 {
        return Ok(f.to_vec());
    }
    let k_max = (t + 15.0 * t.sqrt() + 30.0).ceil() as usize;
    let mut out = vec![0.0; f.len()];
    let mut cur = f.to_vec();
    let mut next = vec![0.0; f.len()];
    for k in 0..=k_max {
        let w = (-t + k as f64 * t.ln() - ln_gamma(k as f64 + 1.0)).exp();
        if w > 0.0 {
            for (o, c) in out.iter_mut().zip(&cur) {
                *o += w * c;
            }
        }
        bx.apply_transition(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(out)
}

/// `P^k f` by repeated application of the transition operator.
pub fn transition_power(bx: &LatticeBox, f: &[f64], k: usize) -> Vec<f64> {
    let mut cur = f.to_vec();
    let mut next = vec![0.0; f.len()];
    for _ in 0..k {
        bx.apply_transition(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}
