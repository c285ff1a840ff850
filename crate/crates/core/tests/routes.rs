//! Cross-route invariants on seeded linear–Gaussian instances.

use enscgp_core::ensemble::{ens_cgp, ensemble_stats, Ensemble};
use enscgp_core::experiments::{corpus_instance, relative_gap, run_equivalence, Instance};
use enscgp_core::gaussian::{condition, kalman_gain, posterior_cov_via_hessian, GaussianLaw, ObservationModel};
use enscgp_core::map_qp::{build_qp, gradient, objective, solve_qp};
use enscgp_core::psd::{canonicalize_factor, eig_psd, range_projector, relative_frobenius, weighted_norm_sq, RankTol};
use enscgp_core::rkhs::{rkhs_inner, rkhs_solve, DiscreteRkhs};
use enscgp_core::rng::NormalStream;
use nalgebra::{linalg::QR, DMatrix, DVector};
use proptest::prelude::*;

fn instances(count: u64) -> impl Iterator<Item = Instance> {
    (0..count).map(corpus_instance)
}

/// Independent oracle: dense (n+m)-dimensional joint covariance, Schur
/// complement through a general LU solve.
fn brute_force_posterior(inst: &Instance) -> (DVector<f64>, DMatrix<f64>) {
    let n = inst.prior.dim();
    let m = inst.obs.obs_dim();
    let k = inst.prior.covariance().into_matrix();
    let h = inst.obs.h();
    let mut joint = DMatrix::zeros(n + m, n + m);
    joint.view_mut((0, 0), (n, n)).copy_from(&k);
    joint.view_mut((0, n), (n, m)).copy_from(&(&k * h.transpose()));
    joint.view_mut((n, 0), (m, n)).copy_from(&(h * &k));
    joint
        .view_mut((n, n), (m, m))
        .copy_from(&(h * &k * h.transpose() + inst.obs.r().as_matrix()));
    let cfy = joint.view((0, n), (n, m)).into_owned();
    let lu = joint.view((n, n), (m, m)).into_owned().lu();
    let innovation = &inst.y - h * inst.prior.mean();
    let mean = inst.prior.mean() + &cfy * lu.solve(&innovation).unwrap();
    let cov = k - &cfy * lu.solve(&cfy.transpose()).unwrap();
    (mean, cov)
}

#[test]
fn routes_agree_with_brute_force_joint() {
    for inst in instances(60) {
        let report = run_equivalence(&inst.prior, &inst.obs, &inst.y).unwrap();
        assert!(report.passed, "seed {}", inst.seed);
        let (mean, cov) = brute_force_posterior(&inst);
        assert!(relative_gap(report.mean(enscgp_core::experiments::MeanRoute::Schur), &mean) <= 1e-8);
        assert!(relative_frobenius(report.schur_covariance.as_matrix(), &cov) <= 1e-8);
    }
}

#[test]
fn qp_stationarity_residual() {
    for inst in instances(60) {
        let obj = build_qp(&inst.prior, &inst.obs, &inst.y).unwrap();
        let x = solve_qp(&obj).unwrap().x_star;
        let q = obj.linear_term();
        let residual = obj.range_basis().transpose() * (obj.hessian_matrix().as_matrix() * &x + q);
        let bound = if q.norm() == 0.0 { 1e-10 } else { 1e-10 * q.norm() };
        assert!(
            residual.norm() <= bound,
            "seed {}: {} > {}",
            inst.seed,
            residual.norm(),
            bound
        );
    }
}

#[test]
fn gradient_matches_central_differences() {
    for inst in instances(30) {
        let obj = build_qp(&inst.prior, &inst.obs, &inst.y).unwrap();
        let basis = obj.range_basis().clone();
        let r = basis.ncols();
        let mut stream = NormalStream::new(1000 + inst.seed);
        for _ in 0..5 {
            let x = &basis * stream.vector(r);
            let analytic = basis.transpose() * gradient(&obj, &x).unwrap();
            let h = 1e-5 * (1.0 + x.norm());
            let fd = DVector::from_fn(r, |j, _| {
                let e = basis.column(j);
                (objective(&obj, &(&x + e * h)).unwrap() - objective(&obj, &(&x - e * h)).unwrap()) / (2.0 * h)
            });
            let err = (&fd - &analytic).norm() / analytic.norm();
            assert!(err <= 1e-6, "seed {}: {err}", inst.seed);
        }
    }
}

#[test]
fn objective_expansion_identity() {
    for inst in instances(30) {
        let obj = build_qp(&inst.prior, &inst.obs, &inst.y).unwrap();
        let mut stream = NormalStream::new(inst.seed);
        let x = obj.range_basis() * stream.vector(obj.range_basis().ncols());
        let a = objective(&obj, &x).unwrap();
        let b = obj.misfit_plus_penalty(&x).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()), "seed {}", inst.seed);
    }
}

#[test]
fn rkhs_solve_matches_qp() {
    for inst in instances(60) {
        let space = DiscreteRkhs::new(inst.prior.cov_factor(), RankTol::Auto);
        let g = rkhs_solve(&space, inst.prior.mean(), &inst.obs, &inst.y).unwrap();
        let qp = solve_qp(&build_qp(&inst.prior, &inst.obs, &inst.y).unwrap()).unwrap();
        assert!(relative_gap(&g, &qp.posterior_mean) <= 1e-10, "seed {}", inst.seed);
    }
}

#[test]
fn rkhs_norm_matches_weighted_norm() {
    for inst in instances(20) {
        let space = DiscreteRkhs::new(inst.prior.cov_factor(), RankTol::Auto);
        let post = condition(&inst.prior, &inst.obs, &inst.y).unwrap();
        let shift = post.mean() - inst.prior.mean();
        let a = rkhs_inner(&space, &shift, &shift).unwrap();
        let b = weighted_norm_sq(&shift, space.pinv()).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn rkhs_range_equals_factor_range() {
    for inst in instances(20) {
        let space = DiscreteRkhs::new(inst.prior.cov_factor(), RankTol::Auto);
        let a = inst.prior.cov_factor().factor();
        let p = a.ncols();
        let omega = QR::new(NormalStream::new(inst.seed + 7).matrix(p, p)).q();
        let alt = canonicalize_factor(&(a * omega));
        let diff = (space.projector().as_matrix() - range_projector(&alt).as_matrix()).norm();
        assert!(
            diff <= 1e-10 * space.projector().frobenius_norm().max(1.0),
            "seed {}",
            inst.seed
        );
    }
}

#[test]
fn reproducing_identity_in_coordinates() {
    for inst in instances(20) {
        let space = DiscreteRkhs::new(inst.prior.cov_factor(), RankTol::Auto);
        let k = inst.prior.covariance().into_matrix();
        let n = k.nrows();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            rkhs_inner(&space, &k.column(i).into_owned(), &k.column(j).into_owned()).unwrap()
        });
        assert!(relative_frobenius(&gram, &k) <= 1e-10, "seed {}", inst.seed);
    }
}

#[test]
fn hessian_covariance_matches_schur() {
    for inst in instances(60) {
        let schur = condition(&inst.prior, &inst.obs, &inst.y).unwrap().covariance();
        let hess = posterior_cov_via_hessian(&inst.prior, &inst.obs).unwrap();
        assert!(
            relative_frobenius(schur.as_matrix(), hess.as_matrix()) <= 1e-8,
            "seed {}",
            inst.seed
        );
    }
}

#[test]
fn gain_columns_lie_in_prior_range() {
    for inst in instances(30) {
        let g = kalman_gain(&inst.prior, &inst.obs).unwrap();
        let p = range_projector(inst.prior.cov_factor());
        let leak = (&g - p.as_matrix() * &g).norm();
        assert!(leak <= 1e-10 * g.norm().max(1.0), "seed {}", inst.seed);
    }
}

#[test]
fn conditioning_never_increases_variance() {
    for inst in instances(40) {
        let post = condition(&inst.prior, &inst.obs, &inst.y).unwrap();
        assert!(post.rank() <= inst.prior.rank());
        let before = eig_psd(&inst.prior.covariance(), RankTol::Auto).unwrap().values;
        let after = eig_psd(&post.covariance(), RankTol::Auto).unwrap().values;
        let scale = before.iter().fold(1.0_f64, |a, v| a.max(*v));
        for (i, v) in after.iter().enumerate() {
            assert!(*v <= before[i] + 1e-10 * scale, "seed {}", inst.seed);
        }
    }
}

#[test]
fn marginalize_then_condition_commutes() {
    let mut stream = NormalStream::new(5);
    for seed in 0..10u64 {
        let inst = corpus_instance(seed);
        let n = inst.prior.dim();
        let subset: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        let m = 2;
        let h_sub = stream.matrix(m, subset.len());
        let mut h_full = DMatrix::zeros(m, n);
        for (c, &i) in subset.iter().enumerate() {
            h_full.set_column(i, &h_sub.column(c));
        }
        let r = DMatrix::identity(m, m) * 0.7;
        let y = stream.vector(m);

        let full = condition(&inst.prior, &ObservationModel::new(h_full, &r).unwrap(), &y).unwrap();
        let a = full.marginal(&subset).unwrap();
        let sub = inst.prior.marginal(&subset).unwrap();
        let b = condition(&sub, &ObservationModel::new(h_sub, &r).unwrap(), &y).unwrap();
        assert!(relative_gap(a.mean(), b.mean()) <= 1e-10, "seed {seed}");
        let scale = a.covariance().frobenius_norm().max(1.0);
        assert!((a.covariance().as_matrix() - b.covariance().as_matrix()).norm() <= 1e-10 * scale);
    }
}

#[test]
fn ensemble_posterior_independent_of_anomaly_rotation() {
    let mut stream = NormalStream::new(404);
    for _ in 0..10 {
        let (n, e) = (6, 4);
        let ens = Ensemble::new(stream.matrix(n, e)).unwrap();
        let stats = ensemble_stats(&ens);
        let omega = QR::new(stream.matrix(e, e)).q();
        let obs = ObservationModel::new(stream.matrix(3, n), &DMatrix::identity(3, 3)).unwrap();
        let y = stream.vector(3);
        let a = ens_cgp(&ens, &obs, &y).unwrap();
        let rotated = GaussianLaw::from_factor(stats.mean.clone(), &(&stats.anomaly * omega), RankTol::Auto).unwrap();
        let b = condition(&rotated, &obs, &y).unwrap();
        assert!(relative_gap(a.mean(), b.mean()) <= 1e-10);
        assert!(relative_frobenius(a.covariance().as_matrix(), b.covariance().as_matrix()) <= 1e-10);
        assert!(stats.rank() < e);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn four_routes_agree_on_random_instances(seed in 0u64..1_000_000) {
        let inst = corpus_instance(seed);
        let report = run_equivalence(&inst.prior, &inst.obs, &inst.y).unwrap();
        prop_assert!(report.max_mean_discrepancy() <= 1e-8);
        prop_assert!(report.covariance_discrepancy <= 1e-8);
        prop_assert!(report.range_leakage <= 1e-10);
    }

    #[test]
    fn mean_shift_confined_to_prior_range(seed in 0u64..1_000_000) {
        let inst = corpus_instance(seed);
        let post = condition(&inst.prior, &inst.obs, &inst.y).unwrap();
        let shift = post.mean() - inst.prior.mean();
        let p = range_projector(inst.prior.cov_factor());
        let leak = (&shift - p.as_matrix() * &shift).norm();
        prop_assert!(leak <= 1e-10 * shift.norm().max(1.0));
    }
}
