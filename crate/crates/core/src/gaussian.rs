//! Gaussian laws, linear observation models and exact conditioning.
//!
//! Covariances are carried in canonical square-root form so that singular
//! (low-rank) priors are first-class. Conditioning follows the Schur
//! complement of the joint law of `(f, y)`:
//!
//! ```text
//! m_post = m + K Hᵀ (H K Hᵀ + R)⁻¹ (y − H m)
//! K_post = K − K Hᵀ (H K Hᵀ + R)⁻¹ H K
//! ```
//!
//! `H K Hᵀ + R` is SPD whenever `R` is, so every solve goes through a
//! Cholesky factorization even when `K` is singular.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::psd::{
    canonical_sqrt, canonical_sqrt_in_basis, canonicalize_factor_with, first_non_finite, symmetrize, PsdFactor,
    RankTol, SymmetricMatrix,
};

/// `N(mean, A Aᵀ)` on `R^n`, with `A` canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    cov_factor: PsdFactor,
    rank_tol: RankTol,
}

impl GaussianLaw {
    /// From a dense covariance.
    pub fn new(mean: DVector<f64>, cov: &SymmetricMatrix, rank_tol: RankTol) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dim("GaussianLaw mean", cov.dim(), mean.len()));
        }
        check_vector(&mean)?;
        let cov_factor = canonical_sqrt(cov, rank_tol)?;
        Ok(GaussianLaw {
            mean,
            cov_factor,
            rank_tol,
        })
    }

    /// From any square-root factor `A` (n×p) of the covariance.
    pub fn from_factor(mean: DVector<f64>, factor: &DMatrix<f64>, rank_tol: RankTol) -> Result<Self> {
        if mean.len() != factor.nrows() {
            return Err(Error::dim("GaussianLaw factor rows", mean.len(), factor.nrows()));
        }
        check_vector(&mean)?;
        if let Some((row, col)) = first_non_finite(factor) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(GaussianLaw {
            mean,
            cov_factor: canonicalize_factor_with(factor, rank_tol),
            rank_tol,
        })
    }

    pub(crate) fn from_parts(mean: DVector<f64>, cov_factor: PsdFactor, rank_tol: RankTol) -> Self {
        debug_assert!(cov_factor.is_canonical());
        GaussianLaw {
            mean,
            cov_factor,
            rank_tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov_factor(&self) -> &PsdFactor {
        &self.cov_factor
    }

    pub fn rank(&self) -> usize {
        self.cov_factor.rank()
    }

    pub fn rank_tol(&self) -> RankTol {
        self.rank_tol
    }

    pub fn covariance(&self) -> SymmetricMatrix {
        self.cov_factor.gram()
    }

    /// Orthonormal basis `U_r` of `Range(K)`.
    pub fn range_basis(&self) -> &DMatrix<f64> {
        self.cov_factor.basis().expect("law factors are canonical")
    }

    /// Marginal law of the listed coordinates.
    pub fn marginal(&self, indices: &[usize]) -> Result<GaussianLaw> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.dim()) {
            return Err(Error::InvalidArgument(format!(
                "marginal index {bad} out of range for dimension {}",
                self.dim()
            )));
        }
        let mean = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.mean[i]));
        let factor = self.cov_factor.factor().select_rows(indices);
        GaussianLaw::from_factor(mean, &factor, self.rank_tol)
    }
}

fn check_vector(v: &DVector<f64>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(row) => Err(Error::NonFinite { row, col: 0 }),
        None => Ok(()),
    }
}

/// `y = H f + ε`, `ε ~ N(0, R)` with `R` SPD.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    h: DMatrix<f64>,
    r: SymmetricMatrix,
    r_chol: Cholesky<f64, Dyn>,
}

impl ObservationModel {
    pub fn new(h: DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        if let Some((row, col)) = first_non_finite(&h) {
            return Err(Error::NonFinite { row, col });
        }
        let r = symmetrize(r)?;
        if r.dim() != h.nrows() {
            return Err(Error::dim("observation noise", h.nrows(), r.dim()));
        }
        let r_chol = Cholesky::new(r.as_matrix().clone()).ok_or(Error::NotSpd("R"))?;
        Ok(ObservationModel { h, r, r_chol })
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &SymmetricMatrix {
        &self.r
    }

    /// Lower Cholesky factor `L` with `R = L Lᵀ`.
    pub fn noise_cholesky(&self) -> DMatrix<f64> {
        self.r_chol.l()
    }

    /// `R⁻¹ B`.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.r_chol.solve(b)
    }

    /// `R⁻¹`.
    pub fn noise_precision(&self) -> SymmetricMatrix {
        SymmetricMatrix::from_square(self.r_chol.inverse())
    }

    /// `Hᵀ R⁻¹ H`.
    pub fn information(&self) -> SymmetricMatrix {
        SymmetricMatrix::from_square(self.h.transpose() * self.whiten(&self.h))
    }

    pub(crate) fn check_state(&self, n: usize) -> Result<()> {
        if self.state_dim() != n {
            return Err(Error::dim("observation matrix columns", n, self.state_dim()));
        }
        Ok(())
    }

    pub(crate) fn check_data(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(Error::dim("observation vector", self.obs_dim(), y.len()));
        }
        check_vector(y)
    }
}

/// Joint law of `(f, y)` under a linear observation model.
#[derive(Debug, Clone)]
pub struct JointGaussian {
    pub mean_f: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub cov_ff: SymmetricMatrix,
    pub cov_fy: DMatrix<f64>,
    pub cov_yy: SymmetricMatrix,
}

pub fn build_joint(prior: &GaussianLaw, obs: &ObservationModel) -> Result<JointGaussian> {
    obs.check_state(prior.dim())?;
    let h = obs.h();
    let cov_ff = prior.covariance();
    let cov_fy = cov_ff.as_matrix() * h.transpose();
    let cov_yy = SymmetricMatrix::from_square(h * &cov_fy + obs.r().as_matrix());
    Ok(JointGaussian {
        mean_f: prior.mean().clone(),
        mean_y: h * prior.mean(),
        cov_ff,
        cov_fy,
        cov_yy,
    })
}

impl JointGaussian {
    /// Schur-complement conditional mean and covariance of `f | y`.
    pub fn condition_on(&self, y: &DVector<f64>) -> Result<(DVector<f64>, SymmetricMatrix)> {
        if y.len() != self.mean_y.len() {
            return Err(Error::dim("observation vector", self.mean_y.len(), y.len()));
        }
        if y.is_empty() {
            return Ok((self.mean_f.clone(), self.cov_ff.clone()));
        }
        let chol = Cholesky::new(self.cov_yy.as_matrix().clone()).ok_or(Error::NotSpd("H K Hᵀ + R"))?;
        let innovation = y - &self.mean_y;
        let mean = &self.mean_f + &self.cov_fy * chol.solve(&innovation);
        // K − K Hᵀ S⁻¹ H K
        let reduction = &self.cov_fy * chol.solve(&self.cov_fy.transpose());
        let cov = SymmetricMatrix::from_square(self.cov_ff.as_matrix() - reduction);
        Ok((mean, cov))
    }
}

/// Kalman gain `K Hᵀ (H K Hᵀ + R)⁻¹`, formed from the covariance factor so
/// that its columns lie in `Range(K)`.
pub fn kalman_gain(prior: &GaussianLaw, obs: &ObservationModel) -> Result<DMatrix<f64>> {
    obs.check_state(prior.dim())?;
    gain_from_factor(prior.cov_factor().factor(), obs)
}

pub(crate) fn gain_from_factor(a: &DMatrix<f64>, obs: &ObservationModel) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = obs.obs_dim();
    if m == 0 || a.ncols() == 0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let ha = obs.h() * a;
    let s = SymmetricMatrix::from_square(&ha * ha.transpose() + obs.r().as_matrix());
    let chol = Cholesky::new(s.into_matrix()).ok_or(Error::NotSpd("H K Hᵀ + R"))?;
    // G = A (HA)ᵀ S⁻¹, i.e. Gᵀ = S⁻¹ (HA) Aᵀ
    Ok(chol.solve(&(&ha * a.transpose())).transpose())
}

/// Exact Gaussian conditioning of `prior` on `y`.
///
/// The Schur covariance is re-factored inside the prior range basis, so the
/// posterior rank never exceeds the prior rank; directions whose posterior
/// variance falls below the law's rank threshold are dropped.
pub fn condition(prior: &GaussianLaw, obs: &ObservationModel, y: &DVector<f64>) -> Result<GaussianLaw> {
    obs.check_state(prior.dim())?;
    obs.check_data(y)?;
    if obs.obs_dim() == 0 {
        return Ok(prior.clone());
    }
    let joint = build_joint(prior, obs)?;
    let (mean, cov) = joint.condition_on(y)?;
    if prior.rank() == 0 {
        return Ok(GaussianLaw::from_parts(
            mean,
            prior.cov_factor().clone(),
            prior.rank_tol(),
        ));
    }
    let basis = prior.range_basis();
    let inner = SymmetricMatrix::from_square(basis.transpose() * cov.as_matrix() * basis);
    let factor = canonical_sqrt_in_basis(basis, &inner, prior.rank_tol())?;
    Ok(GaussianLaw::from_parts(mean, factor, prior.rank_tol()))
}

/// Posterior covariance as the inverse of `Q = K† + Hᵀ R⁻¹ H` restricted to
/// `Range(K)`, re-embedded in `R^n`.
pub fn posterior_cov_via_hessian(prior: &GaussianLaw, obs: &ObservationModel) -> Result<SymmetricMatrix> {
    obs.check_state(prior.dim())?;
    let n = prior.dim();
    if prior.rank() == 0 {
        return Ok(SymmetricMatrix::zeros(n));
    }
    let q = SymmetricMatrix::from_square(
        prior.cov_factor().pseudoinverse(prior.rank_tol()).as_matrix() + obs.information().as_matrix(),
    );
    restricted_inverse(prior.range_basis(), &q)
}

/// `U (Uᵀ Q U)⁻¹ Uᵀ` via Cholesky of the restricted matrix.
pub(crate) fn restricted_inverse(basis: &DMatrix<f64>, q: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let restricted = SymmetricMatrix::from_square(basis.transpose() * q.as_matrix() * basis);
    let chol = Cholesky::new(restricted.into_matrix()).ok_or_else(|| {
        Error::Degenerate("restricted Hessian is numerically singular; check the rank tolerance".into())
    })?;
    Ok(SymmetricMatrix::from_square(basis * chol.solve(&basis.transpose())))
}
