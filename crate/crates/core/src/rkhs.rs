//! The finite-dimensional RKHS `H_K = Range(K)` with `⟨u, v⟩ = uᵀ K† v`.
//!
//! `rkhs_solve` minimizes `‖y − Hg‖²_{R⁻¹} + ‖g − m‖²_{H_K}` over
//! `g ∈ m + H_K`. The functional is twice the MAP objective up to a
//! constant, so the minimizer coincides with the posterior mean; only
//! minimizers are comparable across the two forms.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::ObservationModel;
use crate::psd::{range_projector, weighted_norm_sq, PsdFactor, RankTol, SymmetricMatrix};

/// Membership tolerance for `m + H_K`, relative to `1 + ‖u‖`.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct DiscreteRkhs {
    kernel_factor: PsdFactor,
    pinv: SymmetricMatrix,
    projector: SymmetricMatrix,
}

impl DiscreteRkhs {
    /// From a square-root factor of `K` (canonicalized if needed).
    pub fn new(factor: &PsdFactor, tol: RankTol) -> Self {
        let kernel_factor = factor.to_canonical(tol);
        let pinv = kernel_factor.pseudoinverse(tol);
        let projector = range_projector(&kernel_factor);
        DiscreteRkhs {
            kernel_factor,
            pinv,
            projector,
        }
    }

    pub fn from_kernel(k: &SymmetricMatrix, tol: RankTol) -> Result<Self> {
        let factor = crate::psd::canonical_sqrt(k, tol)?;
        Ok(Self::new(&factor, tol))
    }

    pub fn dim(&self) -> usize {
        self.kernel_factor.dim()
    }

    pub fn kernel_factor(&self) -> &PsdFactor {
        &self.kernel_factor
    }

    pub fn pinv(&self) -> &SymmetricMatrix {
        &self.pinv
    }

    pub fn projector(&self) -> &SymmetricMatrix {
        &self.projector
    }

    /// `‖u‖²_{H_K}`.
    pub fn norm_sq(&self, u: &DVector<f64>) -> Result<f64> {
        rkhs_inner(self, u, u)
    }

    /// Whether `u ∈ H_K` up to [`MEMBERSHIP_TOL`].
    pub fn contains(&self, u: &DVector<f64>) -> Result<bool> {
        self.check(u)?;
        let off = u - self.projector.as_matrix() * u;
        Ok(off.norm() <= MEMBERSHIP_TOL * (1.0 + u.norm()))
    }

    /// `‖y − Hg‖²_{R⁻¹} + ‖g − m‖²_{H_K}`; `+∞` off `m + H_K`.
    pub fn regression_functional(
        &self,
        prior_mean: &DVector<f64>,
        obs: &ObservationModel,
        y: &DVector<f64>,
        g: &DVector<f64>,
    ) -> Result<f64> {
        obs.check_state(self.dim())?;
        obs.check_data(y)?;
        let shift = g - prior_mean;
        if !self.contains(&shift)? {
            return Ok(f64::INFINITY);
        }
        let misfit = y - obs.h() * g;
        Ok(weighted_norm_sq(&misfit, &obs.noise_precision())? + self.norm_sq(&shift)?)
    }

    fn check(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::dim("RKHS vector", self.dim(), u.len()));
        }
        Ok(())
    }
}

/// `uᵀ K† v`.
pub fn rkhs_inner(space: &DiscreteRkhs, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    space.check(u)?;
    space.check(v)?;
    Ok(u.dot(&(space.pinv.as_matrix() * v)))
}

/// Regularized regression over `m + H_K`.
///
/// Writes `g = m + U z` in an orthonormal basis `U` of `H_K`; the penalty
/// is the Gram matrix `⟨u_i, u_j⟩_{H_K}` of that basis, and the normal
/// equations `(Uᵀ Hᵀ R⁻¹ H U + G_U) z = Uᵀ Hᵀ R⁻¹ (y − H m)` are solved by
/// Cholesky.
pub fn rkhs_solve(
    space: &DiscreteRkhs,
    prior_mean: &DVector<f64>,
    obs: &ObservationModel,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    space.check(prior_mean)?;
    obs.check_state(space.dim())?;
    obs.check_data(y)?;
    let basis = space.kernel_factor.basis().expect("canonical");
    let r = basis.ncols();
    if r == 0 || obs.obs_dim() == 0 {
        return Ok(prior_mean.clone());
    }
    let penalty = SymmetricMatrix::from_square(basis.transpose() * space.pinv.as_matrix() * basis);
    let hu = obs.h() * basis;
    let whu = obs.whiten(&hu);
    let normal = SymmetricMatrix::from_square(hu.transpose() * &whu + penalty.as_matrix());
    let chol = Cholesky::new(normal.into_matrix())
        .ok_or_else(|| Error::Degenerate("RKHS normal equations are singular".into()))?;
    let d = y - obs.h() * prior_mean;
    let z = chol.solve(&(whu.transpose() * d));
    Ok(prior_mean + basis * z)
}

/// `K = φᵀφ` for features stored one column per index.
pub fn gram_from_features(features: &DMatrix<f64>) -> SymmetricMatrix {
    SymmetricMatrix::from_square(features.transpose() * features)
}

/// Feature-space Gram matrix `φφᵀ`.
pub fn dual_gram(features: &DMatrix<f64>) -> SymmetricMatrix {
    SymmetricMatrix::from_square(features * features.transpose())
}
