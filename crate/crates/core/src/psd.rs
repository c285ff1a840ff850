//! Symmetric positive-semidefinite linear algebra.
//!
//! Everything downstream works with covariances carried as square-root
//! factors `K = A Aᵀ`. This module owns the numerical rank rule, the
//! canonical (spectral) square root `U_r Λ_r^{1/2}`, the pseudoinverse
//! `U_r Λ_r⁻¹ U_rᵀ` and the orthogonal projector onto `Range(K)`.
//!
//! Determinism: eigenvectors and left singular vectors are sign-normalised
//! so that the largest-magnitude entry of each column is positive, and
//! spectra are sorted in descending order with ties broken on the
//! eigenvector entries.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Numerical rank rule for eigenvalues and singular values.
///
/// `Auto` uses `max(rows, cols) · largest · ε`. `Absolute(t)` uses `t`
/// directly, in the units of the quantity being thresholded (eigenvalues of
/// `K`, singular values of a factor).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RankTol {
    #[default]
    Auto,
    Absolute(f64),
}

impl RankTol {
    pub fn threshold(self, rows: usize, cols: usize, largest: f64) -> f64 {
        match self {
            RankTol::Auto => rows.max(cols) as f64 * largest.abs() * f64::EPSILON,
            RankTol::Absolute(t) => t,
        }
    }

    /// Validates a user-supplied override.
    pub fn absolute(t: f64) -> Result<Self> {
        if t.is_finite() && t >= 0.0 {
            Ok(RankTol::Absolute(t))
        } else {
            Err(Error::InvalidArgument(format!(
                "rank tolerance must be finite and nonnegative, got {t}"
            )))
        }
    }
}

/// A dense real matrix that is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    pub fn identity(n: usize) -> Self {
        SymmetricMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymmetricMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymmetricMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Symmetrizes a matrix that is known to be square.
    pub(crate) fn from_square(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        let t = m.transpose();
        SymmetricMatrix((m + t) * 0.5)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

impl AsRef<DMatrix<f64>> for SymmetricMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Returns `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    if !m.is_square() {
        return Err(Error::dim(
            "symmetrize",
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if let Some((row, col)) = first_non_finite(m) {
        return Err(Error::NonFinite { row, col });
    }
    Ok(SymmetricMatrix::from_square(m.clone()))
}

pub(crate) fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// Retained part of a PSD eigendecomposition.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Retained eigenvalues, descending, all above `threshold`.
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors, one column per retained eigenvalue.
    pub vectors: DMatrix<f64>,
    pub rank: usize,
    pub threshold: f64,
}

/// Eigendecomposition of a PSD matrix with a numerical rank decision.
pub fn eig_psd(k: &SymmetricMatrix, tol: RankTol) -> Result<Spectrum> {
    let n = k.dim();
    if n == 0 {
        return Ok(Spectrum {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
            rank: 0,
            threshold: 0.0,
        });
    }
    let eig = SymmetricEigen::new(k.as_matrix().clone());
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let threshold = tol.threshold(n, n, largest);

    if let Some(&worst) = eig
        .eigenvalues
        .iter()
        .filter(|&&v| v < -threshold)
        .min_by(|a, b| a.total_cmp(b))
    {
        return Err(Error::NotPsd {
            eigenvalue: worst,
            threshold,
        });
    }

    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, &v)| {
            let mut col = eig.eigenvectors.column(i).into_owned();
            normalize_sign(&mut col);
            (v, col)
        })
        .collect();
    sort_pairs(&mut pairs);
    Ok(assemble(n, pairs, threshold))
}

fn assemble(n: usize, pairs: Vec<(f64, DVector<f64>)>, threshold: f64) -> Spectrum {
    let rank = pairs.len();
    let mut vectors = DMatrix::zeros(n, rank);
    let mut values = DVector::zeros(rank);
    for (j, (v, col)) in pairs.into_iter().enumerate() {
        values[j] = v;
        vectors.set_column(j, &col);
    }
    Spectrum {
        values,
        vectors,
        rank,
        threshold,
    }
}

/// Flips `col` so that its largest-magnitude entry is positive.
fn normalize_sign(col: &mut DVector<f64>) {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for &x in col.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        col.neg_mut();
    }
}

fn sort_pairs(pairs: &mut [(f64, DVector<f64>)]) {
    pairs.sort_by(|(va, ca), (vb, cb)| {
        vb.total_cmp(va).then_with(|| {
            ca.iter()
                .zip(cb.iter())
                .map(|(a, b)| b.total_cmp(a))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
}

/// Moore–Penrose pseudoinverse `U_r Λ_r⁻¹ U_rᵀ`.
pub fn pseudoinverse(k: &SymmetricMatrix, tol: RankTol) -> Result<SymmetricMatrix> {
    let spec = eig_psd(k, tol)?;
    Ok(spectral_combine(&spec.vectors, spec.values.iter().map(|v| 1.0 / v)))
}

/// `U diag(w) Uᵀ`, symmetrized.
fn spectral_combine(basis: &DMatrix<f64>, weights: impl Iterator<Item = f64>) -> SymmetricMatrix {
    let mut scaled = basis.clone();
    for (j, w) in weights.enumerate() {
        scaled.column_mut(j).scale_mut(w);
    }
    SymmetricMatrix::from_square(&scaled * basis.transpose())
}

/// A square-root factor `A` of a PSD matrix `K = A Aᵀ`.
///
/// A canonical factor has mutually orthogonal columns `√λ_i u_i`, with the
/// eigenvalues and the orthonormal basis `u_i` carried alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor {
    factor: DMatrix<f64>,
    canonical: Option<Canonical>,
}

#[derive(Debug, Clone, PartialEq)]
struct Canonical {
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl PsdFactor {
    /// Wraps an arbitrary factor without canonicalizing it.
    pub fn from_raw(factor: DMatrix<f64>) -> Self {
        PsdFactor {
            factor,
            canonical: None,
        }
    }

    /// Builds a canonical factor from an orthonormal basis and positive
    /// eigenvalues.
    pub(crate) fn from_spectrum(basis: DMatrix<f64>, eigenvalues: DVector<f64>) -> Self {
        let mut factor = basis.clone();
        for (j, &lambda) in eigenvalues.iter().enumerate() {
            factor.column_mut(j).scale_mut(lambda.sqrt());
        }
        PsdFactor {
            factor,
            canonical: Some(Canonical { basis, eigenvalues }),
        }
    }

    /// Zero-column factor in `R^n`.
    pub fn zero(n: usize) -> Self {
        Self::from_spectrum(DMatrix::zeros(n, 0), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Column count; equals the numerical rank for canonical factors.
    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical.is_some()
    }

    pub fn eigenvalues(&self) -> Option<&DVector<f64>> {
        self.canonical.as_ref().map(|c| &c.eigenvalues)
    }

    /// Orthonormal basis of the factor's range (canonical factors only).
    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.canonical.as_ref().map(|c| &c.basis)
    }

    /// Canonical form of this factor; a clone when already canonical.
    pub fn to_canonical(&self, tol: RankTol) -> PsdFactor {
        if self.is_canonical() {
            self.clone()
        } else {
            canonicalize_factor_with(&self.factor, tol)
        }
    }

    /// `A Aᵀ`.
    pub fn gram(&self) -> SymmetricMatrix {
        SymmetricMatrix::from_square(&self.factor * self.factor.transpose())
    }

    /// `K†` from the carried spectrum.
    pub fn pseudoinverse(&self, tol: RankTol) -> SymmetricMatrix {
        let c = self.to_canonical(tol);
        let canon = c.canonical.as_ref().expect("canonical");
        spectral_combine(&canon.basis, canon.eigenvalues.iter().map(|v| 1.0 / v))
    }
}

/// Canonical square root `U_r Λ_r^{1/2}` of a PSD matrix.
pub fn canonical_sqrt(k: &SymmetricMatrix, tol: RankTol) -> Result<PsdFactor> {
    let spec = eig_psd(k, tol)?;
    Ok(PsdFactor::from_spectrum(spec.vectors, spec.values))
}

/// Canonical factor of `U M Uᵀ` for an orthonormal `U` (n×r) and a
/// symmetric `M` (r×r). The result's range is contained in `Range(U)`.
pub(crate) fn canonical_sqrt_in_basis(
    basis: &DMatrix<f64>,
    inner: &SymmetricMatrix,
    tol: RankTol,
) -> Result<PsdFactor> {
    let spec = eig_psd(inner, tol)?;
    let mut pairs: Vec<(f64, DVector<f64>)> = spec
        .values
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let mut col = basis * spec.vectors.column(j);
            normalize_sign(&mut col);
            (v, col)
        })
        .collect();
    sort_pairs(&mut pairs);
    let s = assemble(basis.nrows(), pairs, spec.threshold);
    Ok(PsdFactor::from_spectrum(s.vectors, s.values))
}

/// Canonical factor `U_r Σ_r` of an arbitrary factor via its thin SVD.
pub fn canonicalize_factor(a: &DMatrix<f64>) -> PsdFactor {
    canonicalize_factor_with(a, RankTol::Auto)
}

pub fn canonicalize_factor_with(a: &DMatrix<f64>, tol: RankTol) -> PsdFactor {
    let (n, p) = a.shape();
    if n == 0 || p == 0 || a.iter().all(|&x| x == 0.0) {
        return PsdFactor::zero(n);
    }
    let triplets = thin_left_svd(a);
    let largest = triplets.iter().fold(0.0_f64, |acc, t| acc.max(t.0));
    let threshold = tol.threshold(n, p, largest);

    let mut pairs: Vec<(f64, DVector<f64>)> = triplets
        .into_iter()
        .filter(|(s, _)| *s > threshold)
        .map(|(s, mut col)| {
            normalize_sign(&mut col);
            (s * s, col)
        })
        .collect();
    sort_pairs(&mut pairs);
    let s = assemble(n, pairs, threshold);
    PsdFactor::from_spectrum(s.vectors, s.values)
}

const JACOBI_MAX_SWEEPS: usize = 60;

/// Singular values and left singular vectors of `a` (n×p), unsorted, via
/// one-sided Jacobi. Tall inputs are orthogonalized column-wise; wide
/// inputs work on `aᵀ` and accumulate the rotations, which then are the
/// left singular vectors. Vectors paired with a zero singular value are
/// zero.
fn thin_left_svd(a: &DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let (n, p) = a.shape();
    if p <= n {
        let mut g = a.clone();
        jacobi_orthogonalize(&mut g, None);
        g.column_iter()
            .map(|c| {
                let s = c.norm();
                let u = if s > 0.0 { c / s } else { c.into_owned() };
                (s, u)
            })
            .collect()
    } else {
        let mut g = a.transpose();
        let mut w = DMatrix::identity(n, n);
        jacobi_orthogonalize(&mut g, Some(&mut w));
        g.column_iter()
            .zip(w.column_iter())
            .map(|(c, u)| (c.norm(), u.into_owned()))
            .collect()
    }
}

/// Rotates column pairs of `g` until they are mutually orthogonal,
/// applying the same rotations to `acc` when given.
fn jacobi_orthogonalize(g: &mut DMatrix<f64>, mut acc: Option<&mut DMatrix<f64>>) {
    let cols = g.ncols();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha = g.column(i).norm_squared();
                let beta = g.column(j).norm_squared();
                let gamma = g.column(i).dot(&g.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(g, i, j, c, s);
                if let Some(m) = acc.as_deref_mut() {
                    rotate_columns(m, i, j, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for k in 0..m.nrows() {
        let (x, y) = (m[(k, i)], m[(k, j)]);
        m[(k, i)] = c * x - s * y;
        m[(k, j)] = s * x + c * y;
    }
}

/// Orthogonal projector `U Uᵀ` onto the range of a factor.
pub fn range_projector(a: &PsdFactor) -> SymmetricMatrix {
    let c = a.to_canonical(RankTol::Auto);
    let basis = c.basis().expect("canonical");
    SymmetricMatrix::from_square(basis * basis.transpose())
}

/// `vᵀ A v`.
pub fn weighted_norm_sq(v: &DVector<f64>, a: &SymmetricMatrix) -> Result<f64> {
    if v.len() != a.dim() {
        return Err(Error::dim("weighted_norm_sq", a.dim(), v.len()));
    }
    Ok(v.dot(&(a.as_matrix() * v)))
}

/// `‖A − B‖_F / max(‖A‖_F, ‖B‖_F)`, zero when both vanish.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}
