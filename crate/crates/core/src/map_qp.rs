//! MAP estimation as a convex quadratic program.
//!
//! In displacement coordinates `x = f − m`, `d = y − H m`, the negative
//! log-posterior is `J(x) = ½ xᵀQx + qᵀx + c` on `Range(K)` with
//!
//! ```text
//! Q = K† + Hᵀ R⁻¹ H,   q = −Hᵀ R⁻¹ d,   c = ½ dᵀ R⁻¹ d
//! ```
//!
//! and `+∞` elsewhere. The solve never forms `K†`: it substitutes
//! `x = A w` with the canonical square root `A`, under which the prior
//! penalty is `½‖w‖²`, and solves `(AᵀHᵀR⁻¹HA + I) w = AᵀHᵀR⁻¹d`.
//! `Q`, `q` and `c` are still materialized for auditing and oracles.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianLaw, ObservationModel};
use crate::psd::{weighted_norm_sq, SymmetricMatrix};

/// Relative feasibility tolerance for `x ∈ Range(K)`.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    hessian: SymmetricMatrix,
    linear: DVector<f64>,
    constant: f64,
    range_basis: DMatrix<f64>,
    sqrt_factor: DMatrix<f64>,
    prior_mean: DVector<f64>,
    data_shift: DVector<f64>,
    obs_matrix: DMatrix<f64>,
    noise_precision: SymmetricMatrix,
    prior_precision: SymmetricMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x_star: DVector<f64>,
    pub posterior_mean: DVector<f64>,
}

pub fn build_qp(prior: &GaussianLaw, obs: &ObservationModel, y: &DVector<f64>) -> Result<QuadraticObjective> {
    obs.check_state(prior.dim())?;
    obs.check_data(y)?;
    let h = obs.h();
    let w = obs.noise_precision();
    let d = y - h * prior.mean();
    let wd = w.as_matrix() * &d;
    let prior_precision = prior.cov_factor().pseudoinverse(prior.rank_tol());
    let hessian = SymmetricMatrix::from_square(prior_precision.as_matrix() + obs.information().as_matrix());
    Ok(QuadraticObjective {
        hessian,
        linear: -(h.transpose() * &wd),
        constant: 0.5 * d.dot(&wd),
        range_basis: prior.range_basis().clone(),
        sqrt_factor: prior.cov_factor().factor().clone(),
        prior_mean: prior.mean().clone(),
        data_shift: d,
        obs_matrix: h.clone(),
        noise_precision: w,
        prior_precision,
    })
}

/// Minimizer of the program and the implied posterior mean `m + x⋆`.
pub fn solve_qp(obj: &QuadraticObjective) -> Result<QpSolution> {
    let n = obj.dim();
    let r = obj.sqrt_factor.ncols();
    if r == 0 || obj.data_shift.iter().all(|&v| v == 0.0) {
        return Ok(QpSolution {
            x_star: DVector::zeros(n),
            posterior_mean: obj.prior_mean.clone(),
        });
    }
    let b = &obj.obs_matrix * &obj.sqrt_factor;
    let wb = obj.noise_precision.as_matrix() * &b;
    let reduced = SymmetricMatrix::from_square(b.transpose() * &wb + DMatrix::identity(r, r));
    let chol = Cholesky::new(reduced.into_matrix()).ok_or_else(|| {
        Error::Degenerate("reduced normal equations are singular; rank tolerance is inconsistent".into())
    })?;
    let w = chol.solve(&(wb.transpose() * &obj.data_shift));
    let x_star = &obj.sqrt_factor * w;
    let posterior_mean = &obj.prior_mean + &x_star;
    Ok(QpSolution { x_star, posterior_mean })
}

/// `½ xᵀQx + qᵀx + c` for `x ∈ Range(K)`.
pub fn objective(obj: &QuadraticObjective, x: &DVector<f64>) -> Result<f64> {
    obj.check_feasible(x)?;
    Ok(0.5 * x.dot(&(obj.hessian.as_matrix() * x)) + obj.linear.dot(x) + obj.constant)
}

/// `Qx + q`.
pub fn gradient(obj: &QuadraticObjective, x: &DVector<f64>) -> Result<DVector<f64>> {
    obj.check_feasible(x)?;
    Ok(obj.hessian.as_matrix() * x + &obj.linear)
}

/// `Q`; constant in `x`.
pub fn hessian(obj: &QuadraticObjective) -> SymmetricMatrix {
    obj.hessian.clone()
}

impl QuadraticObjective {
    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    /// `Q`.
    pub fn hessian_matrix(&self) -> &SymmetricMatrix {
        &self.hessian
    }

    /// `q`.
    pub fn linear_term(&self) -> &DVector<f64> {
        &self.linear
    }

    /// `c`.
    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn range_basis(&self) -> &DMatrix<f64> {
        &self.range_basis
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn data_shift(&self) -> &DVector<f64> {
        &self.data_shift
    }

    /// `K†`.
    pub fn prior_precision(&self) -> &SymmetricMatrix {
        &self.prior_precision
    }

    /// Hessian at `x`, after the same feasibility check as the objective.
    pub fn hessian_at(&self, x: &DVector<f64>) -> Result<SymmetricMatrix> {
        self.check_feasible(x)?;
        Ok(hessian(self))
    }

    /// `½‖d − Hx‖²_{R⁻¹} + ½‖x‖²_{K†}`, the objective before expansion.
    pub fn misfit_plus_penalty(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_feasible(x)?;
        let residual = &self.data_shift - &self.obs_matrix * x;
        Ok(0.5 * weighted_norm_sq(&residual, &self.noise_precision)?
            + 0.5 * weighted_norm_sq(x, &self.prior_precision)?)
    }

    /// Component of `x` outside `Range(K)`.
    pub fn range_residual(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("displacement", self.dim(), x.len()));
        }
        let inside = &self.range_basis * (self.range_basis.transpose() * x);
        Ok((x - inside).norm())
    }

    fn check_feasible(&self, x: &DVector<f64>) -> Result<()> {
        let residual = self.range_residual(x)?;
        let tolerance = FEASIBILITY_TOL * (1.0 + x.norm());
        if residual > tolerance {
            return Err(Error::Infeasible { residual, tolerance });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::condition;
    use crate::psd::RankTol;
    use nalgebra::{dmatrix, dvector};

    fn scalar() -> QuadraticObjective {
        let prior = GaussianLaw::new(dvector![0.0], &SymmetricMatrix::from_diagonal(&[1.0]), RankTol::Auto).unwrap();
        let obs = ObservationModel::new(dmatrix![1.0], &dmatrix![1.0]).unwrap();
        build_qp(&prior, &obs, &dvector![2.0]).unwrap()
    }

    fn rank_one() -> (GaussianLaw, ObservationModel, DVector<f64>) {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.5, -2.0]);
        let prior = GaussianLaw::from_factor(dvector![0.2, -0.1, 1.0], &a, RankTol::Auto).unwrap();
        let obs = ObservationModel::new(DMatrix::identity(3, 3), &DMatrix::identity(3, 3)).unwrap();
        (prior, obs, dvector![1.0, 2.0, -1.0])
    }

    #[test]
    fn scalar_program_terms() {
        let obj = scalar();
        assert!((obj.hessian_matrix().as_matrix()[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((obj.linear_term()[0] + 2.0).abs() < 1e-15);
        assert!((obj.constant() - 2.0).abs() < 1e-15);
        assert!((hessian(&obj).as_matrix()[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_solve_and_objective() {
        let obj = scalar();
        let sol = solve_qp(&obj).unwrap();
        assert!((sol.x_star[0] - 1.0).abs() < 1e-15);
        assert!((sol.posterior_mean[0] - 1.0).abs() < 1e-15);
        assert!((objective(&obj, &dvector![1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(objective(&obj, &dvector![0.0]).unwrap(), obj.constant());
        assert_eq!(gradient(&obj, &dvector![0.0]).unwrap(), obj.linear_term().clone());
    }

    #[test]
    fn zero_shift_gives_zero_minimizer() {
        let (prior, obs, _) = rank_one();
        let y = obs.h() * prior.mean();
        let obj = build_qp(&prior, &obs, &y).unwrap();
        assert_eq!(obj.linear_term(), &DVector::zeros(3));
        assert_eq!(obj.constant(), 0.0);
        assert_eq!(solve_qp(&obj).unwrap().x_star, DVector::zeros(3));
    }

    #[test]
    fn no_information_returns_prior_mean() {
        let k = SymmetricMatrix::from_diagonal(&[2.0, 1.0]);
        let prior = GaussianLaw::new(dvector![1.0, -1.0], &k, RankTol::Auto).unwrap();
        let obs = ObservationModel::new(DMatrix::zeros(2, 2), &DMatrix::identity(2, 2)).unwrap();
        let obj = build_qp(&prior, &obs, &dvector![5.0, 5.0]).unwrap();
        assert!((obj.hessian_matrix().as_matrix() - dmatrix![0.5, 0.0; 0.0, 1.0]).amax() < 1e-15);
        assert_eq!(obj.linear_term(), &DVector::zeros(2));
        let sol = solve_qp(&obj).unwrap();
        assert_eq!(sol.x_star, DVector::zeros(2));
        assert_eq!(&sol.posterior_mean, prior.mean());
    }

    #[test]
    fn rank_one_matches_conditioning() {
        let (prior, obs, y) = rank_one();
        let obj = build_qp(&prior, &obs, &y).unwrap();
        let sol = solve_qp(&obj).unwrap();
        let post = condition(&prior, &obs, &y).unwrap();
        let gap = (&sol.posterior_mean - post.mean()).norm();
        assert!(gap <= 1e-8 * post.mean().norm().max(1.0));
        let stationarity =
            obj.range_basis().transpose() * (obj.hessian_matrix().as_matrix() * &sol.x_star + obj.linear_term());
        assert!(stationarity.norm() <= 1e-10 * obj.linear_term().norm());
    }

    #[test]
    fn minimum_is_global_on_range() {
        let (prior, obs, y) = rank_one();
        let obj = build_qp(&prior, &obs, &y).unwrap();
        let x = solve_qp(&obj).unwrap().x_star;
        let best = objective(&obj, &x).unwrap();
        let dir = obj.range_basis().column(0).into_owned();
        for t in [-1.0, -1e-3, 1e-3, 0.5] {
            assert!(objective(&obj, &(&x + &dir * t)).unwrap() >= best - 1e-12);
        }
        assert!(gradient(&obj, &x).unwrap().dot(&dir).abs() < 1e-10);
    }

    #[test]
    fn infeasible_points_are_rejected() {
        let (prior, obs, y) = rank_one();
        let obj = build_qp(&prior, &obs, &y).unwrap();
        let off = dvector![1.0, 0.0, 0.0];
        assert!(matches!(objective(&obj, &off), Err(Error::Infeasible { .. })));
        assert!(matches!(gradient(&obj, &off), Err(Error::Infeasible { .. })));
        assert!(matches!(obj.hessian_at(&off), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn hessian_is_constant() {
        let (prior, obs, y) = rank_one();
        let obj = build_qp(&prior, &obs, &y).unwrap();
        let u = obj.range_basis().column(0).into_owned();
        let h1 = obj.hessian_at(&(&u * 0.3)).unwrap();
        let h2 = obj.hessian_at(&(&u * -7.0)).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn expansion_identity() {
        let (prior, obs, y) = rank_one();
        let obj = build_qp(&prior, &obs, &y).unwrap();
        let x = obj.range_basis().column(0) * 0.8;
        let a = objective(&obj, &x).unwrap();
        let b = obj.misfit_plus_penalty(&x).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
    }
}
