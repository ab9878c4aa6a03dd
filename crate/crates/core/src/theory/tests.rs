use super::*;
use crate::localize::da_loss_grad;
use crate::oracle::calibrate_pulse;
use crate::pln::{pln_init, InputNormalization, PlnArchitecture};
use crate::signal::make_pulse;
use proptest::prelude::*;

fn grid() -> TimeGrid {
    TimeGrid::new(4000.0, 0.6).unwrap()
}

fn small_model(seed: u64) -> ModelParams {
    let env = Environment::reference();
    let region = crate::oracle::Region::default_training();
    let pulse = calibrate_pulse(&env, &SourceLocation::reference(), &make_pulse(750.0, 500.0, 0.05).unwrap(), &grid()).unwrap();
    ModelParams {
        pln: pln_init(&PlnArchitecture::reduced(), InputNormalization::from_region(&region, 120.0), 700.0, seed).unwrap(),
        sound_speed: 1500.0,
        adapt_sound_speed: false,
        receiver_depth: 120.0,
        pulse,
    }
}

/// Reduced network pre-trained on the local region (shared across tests).
fn trained() -> &'static ModelParams {
    static MODEL: std::sync::OnceLock<ModelParams> = std::sync::OnceLock::new();
    MODEL.get_or_init(|| {
        let env = Environment::reference();
        let pulse = small_model(0).pulse;
        let ds = crate::oracle::gen_dataset(
            &env,
            &local_region(),
            128,
            &pulse,
            &grid(),
            crate::oracle::NoisePolicy::Noiseless,
            crate::oracle::SamplingPolicy::Stratified,
            7,
        )
        .unwrap();
        crate::forward::pretrain(&ds, &PlnArchitecture::reduced(), &crate::forward::TrainConfig::default()).unwrap().0.model
    })
}

fn field() -> (ModelParams, GradientField) {
    let m = trained().clone();
    let f = GradientField::new(&m, 10.0, &Environment::reference(), &SourceLocation::reference(), &grid()).unwrap();
    (m, f)
}

fn shifted(v: &[f64], k: f64) -> Vec<f64> {
    v.iter().enumerate().map(|(i, x)| x + k * ((i % 5) as f64 - 2.0) * 1e-3).collect()
}

/// `G(v) = A(v − c)` with a fixed SPD `A`.
struct Quadratic {
    a: DMatrix<f64>,
    centre: Vec<f64>,
}

impl Gradient for Quadratic {
    fn dim(&self) -> usize {
        self.centre.len()
    }
    fn gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        let d = DVector::from_iterator(v.len(), v.iter().zip(&self.centre).map(|(a, b)| a - b));
        Ok((&self.a * d).iter().cloned().collect())
    }
}

fn quadratic() -> Quadratic {
    let n = 4;
    let b = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j * 7) % 5) as f64 - 2.0);
    Quadratic {
        a: &b * b.transpose() + DMatrix::identity(n, n) * 2.0,
        centre: vec![0.5, -1.0, 2.0, 0.25],
    }
}

#[test]
fn field_matches_adaptive_loss_gradient() {
    let (m, f) = field();
    let p = SourceLocation::new(611.0, 19.5);
    let v = shifted(&f.reference_point(&p), 1.0);
    let g = f.gradient(&v).unwrap();
    let n = f.n_weights();
    let r = noiseless_received(&Environment::reference(), &SourceLocation::reference(), &m.pulse, &grid()).unwrap();
    let (_, gw, gp) = da_loss_grad(&m.with_adapt_values(&v[..n]), &SourceLocation::new(v[n], v[n + 1]), &r, &m.adapt_vector(), 10.0).unwrap();
    for (a, b) in g.iter().zip(gw.values.iter().chain(&gp)) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
    let direct = grad_g(&v, &Environment::reference(), &SourceLocation::reference(), 10.0, &m, &grid()).unwrap();
    assert_eq!(direct, g);
}

#[test]
fn regularizer_field_is_linear_in_weights() {
    let m = small_model(4);
    let f = GradientField::regularizer_only(&m, 3.0);
    let v = shifted(&f.reference_point(&SourceLocation::reference()), 5.0);
    let g = f.gradient(&v).unwrap();
    let n = f.n_weights();
    for i in 0..n {
        assert!((g[i] - 3.0 * (v[i] - m.adapt_vector().values[i])).abs() < 1e-15);
    }
    assert_eq!(&g[n..], &[0.0, 0.0]);
}

#[test]
fn wrong_dimension_is_rejected() {
    let (_, f) = field();
    assert!(f.gradient(&[1.0, 2.0]).is_err());
}

#[test]
fn quadratic_lambda_is_gamma_on_weights_and_zero_on_location() {
    let m = small_model(4);
    let f = GradientField::regularizer_only(&m, 2.5);
    let v0 = f.reference_point(&SourceLocation::reference());
    let ones = vec![1.0; f.dim()];
    let (h, asym) = fd_hessian(&f, &v0, &relative_steps(&v0, 1e-4)).unwrap();
    assert!(asym < 1e-12);
    let eig = SymmetricEigen::new(h).eigenvalues;
    let n = f.n_weights();
    assert_eq!(eig.iter().filter(|x| (*x - 2.5).abs() < 1e-6).count(), n);
    assert_eq!(eig.iter().filter(|x| x.abs() < 1e-9).count(), 2);
    let lam = estimate_lambda(&f, &v0, &ones, 0.1, 8, &relative_steps(&v0, 1e-4), 1).unwrap();
    assert!(lam.lambda.abs() < 1e-9, "{}", lam.lambda);
    assert_eq!(lam.samples.len(), 8);
}

#[test]
fn hessian_is_symmetric_on_the_signal_loss() {
    let (_, f) = field();
    let v = f.reference_point(&SourceLocation::new(610.3, 20.1));
    let (rough, _) = fd_hessian(&f, &v, &relative_steps(&v, 1e-4)).unwrap();
    let (_, asym) = fd_hessian(&f, &v, &normalized_steps(&curvature_scale(&rough), 1e-4)).unwrap();
    assert!(asym <= 1e-3, "{asym}");
}

#[test]
fn quadratic_curvature_is_zero_with_unit_slope() {
    let q = quadratic();
    let v0 = q.centre.clone();
    let ones = vec![1.0; 4];
    let (h, _) = fd_hessian(&q, &v0, &relative_steps(&v0, 1e-4)).unwrap();
    let xi = estimate_xi(&q, &v0, &ones, &h, 0.1, 33, 1e-4).unwrap().unwrap();
    assert!(xi.xi < 1e-6, "{}", xi.xi);
    assert!(xi.slope_error < 1e-9, "{}", xi.slope_error);
    assert!(xi.g0_norm < 1e-15);
}

#[test]
fn singular_hessian_gives_no_curvature_estimate() {
    let m = small_model(4);
    let f = GradientField::regularizer_only(&m, 1.0);
    let v0 = f.reference_point(&SourceLocation::reference());
    let h = DMatrix::zeros(f.dim(), f.dim());
    assert!(estimate_xi(&f, &v0, &vec![1.0; f.dim()], &h, 0.1, 33, 1e-4).unwrap().is_none());
}

#[test]
fn lipschitz_is_zero_without_data() {
    let m = small_model(4);
    let base = GradientField::regularizer_only(&m, 1.0);
    let other = GradientField::regularizer_only(&m, 1.0);
    let v0 = base.reference_point(&SourceLocation::reference());
    let est = estimate_lipschitz(&base, &[(EnvPerturbation::depth(-1.0), &other)], &[v0], &vec![1.0; base.dim()]).unwrap();
    assert_eq!(est.lipschitz, 0.0);
}

#[test]
fn lipschitz_two_scale_probe_is_locally_linear() {
    let (m, f) = field();
    let env = Environment::reference();
    let v = f.reference_point(&SourceLocation::new(610.2, 20.1));
    let ones = vec![1.0; f.dim()];
    let ratio = |eps: EnvPerturbation| {
        let g = GradientField::new(&m, 10.0, &eps.apply(&env), &SourceLocation::reference(), &grid()).unwrap();
        estimate_lipschitz(&f, &[(eps, &g)], &[v.clone()], &ones).unwrap().lipschitz
    };
    let (a, b) = (ratio(EnvPerturbation::depth(-0.01)), ratio(EnvPerturbation::depth(-0.02)));
    assert!(a > 0.0 && b / a < 2.0 && a / b < 2.0, "{a} {b}");
    // zero perturbation is skipped
    assert_eq!(estimate_lipschitz(&f, &[(EnvPerturbation::default(), &f)], &[v], &ones).unwrap().lipschitz, 0.0);
}

#[test]
fn config_rejects_small_sample_counts() {
    let cfg = TheoremConfig {
        convexity_samples: 4,
        ..TheoremConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(TheoremConfig { sigma: 0.0, ..TheoremConfig::default() }.validate().is_err());
    assert!(TheoremConfig::default().validate().is_ok());
}

fn problem() -> TheoremProblem {
    let p = SourceLocation::reference();
    TheoremProblem {
        w_tr: trained().clone(),
        gamma: 10.0,
        env: Environment::reference(),
        source: p,
        init: SourceLocation::new(p.x + 0.05, p.z - 0.02),
        grid: grid(),
    }
}

#[test]
fn zero_perturbation_has_no_displacement() {
    let rep = verify_theorem(&problem(), EnvPerturbation::default(), &TheoremConfig::default()).unwrap();
    assert_eq!(rep.observed_displacement, 0.0);
    assert!(rep.checks.stationary, "{}", rep.stationarity);
    assert!(rep.lambda <= rep.lambda_at_v0);
    if let Some(b) = rep.bound {
        assert!(rep.observed_displacement <= b);
    }
    let json = serde_json::to_string(&rep).unwrap();
    let back: TheoremReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn large_perturbation_exceeds_the_budget() {
    let rep = verify_theorem(&problem(), EnvPerturbation::depth(-10.0), &TheoremConfig::default()).unwrap();
    assert!(!rep.checks.within_budget);
    assert_eq!(rep.checks.bound_holds, None);
    assert_eq!(rep.verdict, Verdict::NotApplicable);
}

#[test]
fn quadratic_problem_reports_zero_lambda_honestly() {
    let rep = verify_with(&problem(), EnvPerturbation::depth(-0.05), &TheoremConfig::default(), false).unwrap();
    assert!(rep.lambda.abs() < 1e-9);
    assert!(!rep.checks.convex);
    assert_eq!(rep.lipschitz, 0.0);
    assert_eq!(rep.verdict, Verdict::NotApplicable);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lambda_is_below_every_rayleigh_quotient(dir in proptest::collection::vec(-1.0f64..1.0, 4)) {
        prop_assume!(dir.iter().any(|x| x.abs() > 1e-3));
        let q = quadratic();
        let ones = vec![1.0; 4];
        let steps = relative_steps(&q.centre, 1e-4);
        let lam = estimate_lambda(&q, &q.centre, &ones, 0.1, 8, &steps, 3).unwrap();
        let d = DVector::from_vec(dir);
        let rq = d.dot(&(&q.a * &d)) / d.dot(&d);
        prop_assert!(lam.lambda <= rq + 1e-9);
    }

    #[test]
    fn lipschitz_grows_with_the_sample_set(k in 1usize..5) {
        let (m, f) = field();
        let env = Environment::reference();
        let v = f.reference_point(&SourceLocation::new(610.1, 20.0));
        let ones = vec![1.0; f.dim()];
        let fields: Vec<(EnvPerturbation, GradientField)> = (1..=5)
            .map(|i| {
                let e = EnvPerturbation::depth(-0.3 * i as f64);
                (e, GradientField::new(&m, 10.0, &e.apply(&env), &SourceLocation::reference(), &grid()).unwrap())
            })
            .collect();
        let refs: Vec<(EnvPerturbation, &dyn Gradient)> = fields.iter().map(|(e, g)| (*e, g as &dyn Gradient)).collect();
        let small = estimate_lipschitz(&f, &refs[..k], &[v.clone()], &ones).unwrap().lipschitz;
        let big = estimate_lipschitz(&f, &refs[..k + 1], &[v], &ones).unwrap().lipschitz;
        prop_assert!(big >= small);
    }
}
