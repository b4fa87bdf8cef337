use approx::assert_relative_eq;
use evkf_core::error::Error;
use evkf_core::expfam::{MeanParams, NaturalParams};
use evkf_core::observations::ObservationModel;
use evkf_core::rng::{seeded, FilterRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    PoissonDense,
    PoissonDiag,
    PoissonCb,
    PoissonGamma,
    GaussDense,
    GaussDiag,
    GaussCb,
    GaussGamma,
}

const KINDS: [Kind; 8] = [
    Kind::PoissonDense,
    Kind::PoissonDiag,
    Kind::PoissonCb,
    Kind::PoissonGamma,
    Kind::GaussDense,
    Kind::GaussDiag,
    Kind::GaussCb,
    Kind::GaussGamma,
];

fn instance(kind: Kind, rng: &mut FilterRng) -> (ObservationModel, NaturalParams, DVector<f64>) {
    let (l, n) = (2, 3);
    let c = DMatrix::from_fn(n, l, |_, _| rng.random_range(-0.5..0.5));
    let b = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let poisson = matches!(kind, Kind::PoissonDense | Kind::PoissonDiag | Kind::PoissonCb | Kind::PoissonGamma);
    let obs = if poisson {
        ObservationModel::poisson(c, b, rng.random_range(0.1..2.0)).unwrap()
    } else {
        let r = DVector::from_fn(n, |_, _| rng.random_range(0.1..2.0));
        ObservationModel::gaussian(c, b, r).unwrap()
    };
    let q = match kind {
        Kind::PoissonDense | Kind::GaussDense => {
            let m = DVector::from_fn(l, |_, _| rng.random_range(-1.0..1.0));
            let bm = DMatrix::from_fn(l, l, |_, _| rng.random_range(-0.7..0.7));
            NaturalParams::gaussian(&m, &(&bm * bm.transpose() + DMatrix::identity(l, l) * 0.05)).unwrap()
        }
        Kind::PoissonDiag | Kind::GaussDiag => NaturalParams::gaussian_diag(
            &DVector::from_fn(l, |_, _| rng.random_range(-1.0..1.0)),
            &DVector::from_fn(l, |_, _| rng.random_range(0.05..0.8)),
        )
        .unwrap(),
        Kind::PoissonCb | Kind::GaussCb => NaturalParams::continuous_bernoulli(&DVector::from_fn(l, |_, _| {
            rng.random_range(-6.0..6.0)
        }))
        .unwrap(),
        Kind::PoissonGamma | Kind::GaussGamma => NaturalParams::gamma(
            &DVector::from_fn(l, |_, _| rng.random_range(2.0..10.0)),
            &DVector::from_fn(l, |_, _| rng.random_range(2.0..6.0)),
        )
        .unwrap(),
    };
    let z = q.sample(1, rng).unwrap().row(0).transpose();
    let y = obs.sample_obs(&z, rng).unwrap();
    (obs, q, y)
}

#[test]
fn closed_forms_match_monte_carlo() {
    let mut rng = seeded(300);
    let samples = 1_000_000;
    for kind in KINDS {
        for _ in 0..20 {
            let (obs, q, y) = instance(kind, &mut rng);
            let exact = obs.expected_loglik(&q, &y).unwrap();
            let draws = q.sample(samples, &mut rng).unwrap();
            let (mut s, mut s2) = (0.0, 0.0);
            for row in draws.row_iter() {
                let ll = obs.log_likelihood(&row.transpose(), &y).unwrap();
                s += ll;
                s2 += ll * ll;
            }
            let mean = s / samples as f64;
            let se = ((s2 / samples as f64 - mean * mean).max(0.0) / samples as f64).sqrt();
            assert!(
                (mean - exact).abs() < 4.0 * se + 1e-12,
                "{kind:?}: closed form {exact} vs MC {mean} ± {se}"
            );
        }
    }
}

#[test]
fn mean_parameter_gradients_match_finite_differences() {
    let mut rng = seeded(301);
    for kind in KINDS {
        for _ in 0..50 {
            let (obs, q, y) = instance(kind, &mut rng);
            let grad = obs.grad_expected_loglik_mean_params(&q, &y).unwrap();
            let mu = q.to_mean().unwrap();
            let family = q.family();
            for k in 0..family.stat_dim() {
                let h = 1e-5 * mu.mu()[k].abs().max(0.1);
                let eval = |d: f64| {
                    let mut shifted = mu.mu().clone();
                    shifted[k] += d;
                    let p = MeanParams::new(family, shifted).unwrap().to_natural().unwrap();
                    obs.expected_loglik(&p, &y).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (fd - grad[k]).abs() / denom < 1e-5,
                    "{kind:?} k={k}: fd {fd} vs analytic {}",
                    grad[k]
                );
            }
        }
    }
}

#[test]
fn poisson_gaussian_hand_value() {
    let obs = ObservationModel::poisson(DMatrix::from_element(1, 1, 1.0), v(&[0.0]), 1.0).unwrap();
    let q = NaturalParams::gaussian(&v(&[0.0]), &DMatrix::identity(1, 1)).unwrap();
    let value = obs.expected_loglik(&q, &v(&[2.0])).unwrap();
    // the closed form without the −log y! constant is −e^{1/2}
    assert_relative_eq!(value + 2f64.ln(), -(0.5f64).exp(), epsilon = 1e-12);
}

#[test]
fn point_mass_limit_recovers_log_likelihood() {
    let obs = ObservationModel::poisson(DMatrix::zeros(1, 1), v(&[0.0]), 1.0).unwrap();
    let q = NaturalParams::gaussian(&v(&[0.0]), &DMatrix::from_element(1, 1, 1e-9)).unwrap();
    assert_relative_eq!(obs.expected_loglik(&q, &v(&[1.0])).unwrap(), -1.0, epsilon = 1e-8);
}

#[test]
fn zero_loading_gives_zero_second_moment_gradient() {
    let obs = ObservationModel::gaussian(DMatrix::zeros(2, 2), v(&[0.3, -1.0]), v(&[0.5, 0.5])).unwrap();
    let q = NaturalParams::gaussian(&v(&[0.2, 0.1]), &DMatrix::identity(2, 2)).unwrap();
    let g = obs.grad_expected_loglik_mean_params(&q, &v(&[0.3, -1.0])).unwrap();
    assert!(g.amax() == 0.0);
}

#[test]
fn gaussian_expected_loglik_is_concave_in_the_mean() {
    let mut rng = seeded(302);
    for _ in 0..50 {
        let (obs, q, y) = instance(Kind::GaussDense, &mut rng);
        let (m, p) = q.gaussian_moments().unwrap();
        let dir = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let at = |s: f64| {
            let q = NaturalParams::gaussian(&(&m + &dir * s), &p).unwrap();
            obs.expected_loglik(&q, &y).unwrap()
        };
        let h = 0.1;
        assert!(at(h) + at(-h) - 2.0 * at(0.0) <= 1e-10);
    }
}

#[test]
fn gamma_mgf_domain_violation_names_the_entry() {
    let c = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 5.0]);
    let obs = ObservationModel::poisson(c, v(&[0.0, 0.0]), 1.0).unwrap();
    let q = NaturalParams::gamma(&v(&[2.0, 2.0]), &v(&[3.0, 3.0])).unwrap();
    match obs.expected_loglik(&q, &v(&[1.0, 0.0])) {
        Err(Error::Domain(msg)) => assert!(msg.contains("n=1, l=1"), "{msg}"),
        other => panic!("expected a domain error, got {other:?}"),
    }
}

#[test]
fn sampling_rates_and_moments() {
    let mut rng = seeded(303);
    let obs = ObservationModel::poisson(DMatrix::from_element(3, 2, 0.4), DVector::zeros(3), 0.5).unwrap();
    let (rate, _) = obs.conditional_moments(&DVector::zeros(2)).unwrap();
    assert_eq!(rate, DVector::from_element(3, 0.5));
    let z = v(&[1.0, 1.5]);
    let expected = 0.5 * (0.4f64 * 2.5).exp();
    let n = 100_000;
    let mut total = 0.0;
    for _ in 0..n {
        total += obs.sample_obs(&z, &mut rng).unwrap()[0];
    }
    let se = (expected / n as f64).sqrt();
    assert!((total / n as f64 - expected).abs() < 5.0 * se);
    assert!(ObservationModel::gaussian(DMatrix::zeros(1, 1), v(&[0.0]), v(&[0.0])).is_err());
    let huge = ObservationModel::poisson(DMatrix::from_element(1, 1, 1.0), v(&[0.0]), 1.0).unwrap();
    assert!(matches!(huge.sample_obs(&v(&[800.0]), &mut rng), Err(Error::Numeric(_))));
}

#[test]
fn bad_observations_are_rejected() {
    let obs = ObservationModel::poisson(DMatrix::from_element(1, 1, 1.0), v(&[0.0]), 1.0).unwrap();
    let q = NaturalParams::gaussian(&v(&[0.0]), &DMatrix::identity(1, 1)).unwrap();
    assert!(obs.expected_loglik(&q, &v(&[-1.0])).is_err());
    assert!(obs.expected_loglik(&q, &v(&[0.5])).is_err());
    assert!(obs.expected_loglik(&q, &v(&[1.0, 2.0])).is_err());
    let q2 = NaturalParams::gaussian(&v(&[0.0, 0.0]), &DMatrix::identity(2, 2)).unwrap();
    assert!(obs.expected_loglik(&q2, &v(&[1.0])).is_err());
}
