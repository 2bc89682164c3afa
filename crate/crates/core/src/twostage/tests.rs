use super::*;
use crate::ad::Tensor;
use crate::dist::{
    normal_log_pdf, DiagonalGaussian, Flat, FnDensity, QuarticMarginal, SoftwarePrior, UnnormalizedLogDensity,
};
use crate::error::Error;
use crate::flow::{FlowConfig, FlowModel};
use crate::rng::Rng;
use crate::train::TrainConfig;

fn points(n: usize, d: usize, scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    Tensor::matrix(n, d, (0..n * d).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn fd_grad(f: &dyn UnnormalizedLogDensity<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let eps = 1e-6;
    let mut g = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        for j in 0..x.cols() {
            let mut up = x.row(r).to_vec();
            let mut down = up.clone();
            up[j] += eps;
            down[j] -= eps;
            let a = f.log_density(&Tensor::matrix(1, x.cols(), up).unwrap()).unwrap()[0];
            let b = f.log_density(&Tensor::matrix(1, x.cols(), down).unwrap()).unwrap()[0];
            g.push((a - b) / (2.0 * eps));
        }
    }
    Tensor::matrix(x.rows(), x.cols(), g).unwrap()
}

fn assert_grad_matches(f: &dyn UnnormalizedLogDensity<f64>, x: &Tensor<f64>, tol: f64) {
    let (_, g) = f.log_density_grad(x).unwrap();
    let num = fd_grad(f, x);
    for (a, b) in g.data().iter().zip(num.data()) {
        assert!((a - b).abs() <= tol * b.abs().max(1.0), "{a} vs {b}");
    }
}

fn std_normal_1d() -> DiagonalGaussian<f64> {
    DiagonalGaussian::standard(1)
}

#[test]
fn no_components_reduces_to_analytic_term() {
    let h = HierarchicalH::new(3, 2.0, SoftwarePrior::Gaussian { scale: 0.5 }).unwrap();
    let t = compose_target::<f64>(
        4,
        Some(Component::new(SubvectorSpec::new("h", vec![0, 1, 2, 3]), h)),
        vec![],
        Combination::Product,
    )
    .unwrap();
    let x = points(20, 4, 3.0, 1);
    let direct = UnnormalizedLogDensity::<f64>::log_density(&h, &x).unwrap();
    assert_eq!(t.log_density(&x).unwrap(), direct);
}

#[test]
fn independent_standard_normals_compose_to_bivariate_normal() {
    let t = compose_target(
        2,
        None,
        vec![
            Component::new(SubvectorSpec::new("a", vec![0]), std_normal_1d()),
            Component::new(SubvectorSpec::new("b", vec![1]), std_normal_1d()),
        ],
        Combination::Product,
    )
    .unwrap();
    let x = points(50, 2, 2.0, 2);
    let (v, g) = t.log_density_grad(&x).unwrap();
    let (want, want_g) = DiagonalGaussian::standard(2).log_density_grad(&x).unwrap();
    for (a, b) in v.iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
    assert_eq!(g.data(), want_g.data());
}

fn exact_xy(x: &[f64]) -> f64 {
    QuarticMarginal::log_prob(x[0]) + normal_log_pdf(x[1], (2.0 * x[0]).sin().powi(3), 0.1)
}

fn exact_xz(x: &[f64]) -> f64 {
    QuarticMarginal::log_prob(x[0]) + normal_log_pdf(x[1], 5.0 * (std::f64::consts::PI * x[0]).sin(), 0.8)
}

#[test]
fn joint_composition_with_exact_components_is_exact() {
    let t = compose_target(
        3,
        Some(Component::new(
            SubvectorSpec::new("h", vec![0]),
            crate::dist::QuarticReciprocal,
        )),
        vec![
            Component::new(SubvectorSpec::new("xy", vec![0, 1]), FnDensity::new(2, exact_xy)),
            Component::new(SubvectorSpec::new("xz", vec![0, 2]), FnDensity::new(2, exact_xz)),
        ],
        Combination::Product,
    )
    .unwrap();
    let x = points(30, 3, 0.7, 3);
    let v = t.log_density(&x).unwrap();
    for (r, got) in v.iter().enumerate() {
        let p = x.row(r);
        let want = QuarticMarginal::log_prob(p[0])
            + normal_log_pdf(p[1], (2.0 * p[0]).sin().powi(3), 0.1)
            + normal_log_pdf(p[2], 5.0 * (std::f64::consts::PI * p[0]).sin(), 0.8);
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
    assert_grad_matches(&t, &points(5, 3, 0.5, 4), 1e-5);
}

#[test]
fn joint_composition_helper_uses_shared_coordinate() {
    let mut rng = Rng::seed_from_u64(5);
    let cfg = FlowConfig {
        hidden: vec![4],
        ..FlowConfig::default()
    };
    let mut g1 = FlowModel::build(2, &cfg, &mut rng).unwrap();
    g1.initialize_identity();
    g1.randomize_parameters(0.2, &mut rng);
    let mut g2 = g1.clone();
    g2.randomize_parameters(0.2, &mut rng);
    let t = joint_composition(g1.clone(), g2.clone()).unwrap();
    let x = points(10, 3, 1.0, 6);
    let a = g1.log_prob(&x.select_columns(&[0, 1])).unwrap();
    let b = g2.log_prob(&x.select_columns(&[0, 2])).unwrap();
    for (r, v) in t.log_density(&x).unwrap().iter().enumerate() {
        let want = -QuarticMarginal::log_prob(x.row(r)[0]) + a[r] + b[r];
        assert!((v - want).abs() < 1e-12);
    }
    assert_grad_matches(&t, &points(4, 3, 0.8, 7), 1e-5);
}

#[test]
fn mixture_uses_log_sum_exp() {
    let a = DiagonalGaussian::<f64>::new(vec![-2.0], vec![0.5]).unwrap();
    let b = DiagonalGaussian::new(vec![1.0], vec![1.5]).unwrap();
    let t = compose_target(
        1,
        None,
        vec![
            Component::new(SubvectorSpec::new("a", vec![0]), a.clone()),
            Component::new(SubvectorSpec::new("b", vec![0]), b.clone()),
        ],
        Combination::Mixture(vec![0.3, 0.7]),
    )
    .unwrap();
    for x in [-40.0, -2.0, 0.0, 3.0, 60.0] {
        let got = t.log_density(&Tensor::matrix(1, 1, vec![x]).unwrap()).unwrap()[0];
        let la = a.log_prob(&[x]).unwrap();
        let lb = b.log_prob(&[x]).unwrap();
        let m = la.max(lb);
        let want = m + (0.3 * (la - m).exp() + 0.7 * (lb - m).exp()).ln();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
    assert_grad_matches(&t, &points(8, 1, 2.0, 8), 1e-5);
}

#[test]
fn custom_rule_receives_log_values() {
    let rule: CustomRule<f64> = std::sync::Arc::new(|lh, lg: &[f64]| (lh + 2.0 * lg[0], 1.0, vec![2.0]));
    let t = compose_target(
        1,
        Some(Component::new(
            SubvectorSpec::new("h", vec![0]),
            DiagonalGaussian::new(vec![1.0], vec![2.0]).unwrap(),
        )),
        vec![Component::new(SubvectorSpec::new("g", vec![0]), std_normal_1d())],
        Combination::Custom(rule),
    )
    .unwrap();
    let x = points(6, 1, 1.5, 9);
    let v = t.log_density(&x).unwrap();
    for (r, got) in v.iter().enumerate() {
        let p = x.row(r)[0];
        let want = normal_log_pdf(p, 1.0, 2.0) + 2.0 * normal_log_pdf(p, 0.0, 1.0);
        assert!((got - want).abs() < 1e-12);
    }
    assert_grad_matches(&t, &x, 1e-6);
}

#[test]
fn invalid_compositions_list_every_problem() {
    let r = compose_target::<f64>(
        2,
        None,
        vec![
            Component::new(SubvectorSpec::new("a", vec![0, 5]), DiagonalGaussian::standard(2)),
            Component::new(SubvectorSpec::new("b", vec![0]), DiagonalGaussian::standard(2)),
        ],
        Combination::Mixture(vec![0.5, 0.6]),
    );
    match r {
        Err(Error::Spec(p)) => {
            assert!(p.len() >= 3, "{p:?}");
            assert!(p.iter().any(|m| m.contains("sum to")));
            assert!(p.iter().any(|m| m.contains("dimension 2 but the index set has 1")));
        }
        other => panic!("unexpected {other:?}"),
    }
    let uncovered = compose_target::<f64>(
        3,
        None,
        vec![Component::new(SubvectorSpec::new("a", vec![0]), std_normal_1d())],
        Combination::Product,
    );
    assert!(matches!(uncovered, Err(Error::Spec(_))));
}

#[test]
fn flat_priors_leave_hierarchical_normal_term() {
    let h = HierarchicalH::new(3, 2.0, SoftwarePrior::Flat).unwrap();
    let x = points(10, 4, 3.0, 10);
    let v = UnnormalizedLogDensity::<f64>::log_density(&h, &x).unwrap();
    for (r, got) in v.iter().enumerate() {
        let p = x.row(r);
        let want: f64 = (0..3).map(|i| normal_log_pdf(p[i], p[3], 2.0)).sum();
        assert!((got - want).abs() < 1e-12);
    }
    assert_grad_matches(&h, &x, 1e-6);
}

/// Direct transcription of the completed-square form
/// `Π (√(2π)τ)⁻¹ exp(-(A²-τ²)/(2A²τ²) (θ - A²γ/(A²-τ²))²)`.
fn completed_square(theta: &[f64], gamma: f64, a: f64, tau: f64) -> f64 {
    let (a2, t2) = (a * a, tau * tau);
    theta
        .iter()
        .map(|&t| {
            let c = a2 * gamma / (a2 - t2);
            -(2.0 * std::f64::consts::PI).sqrt().ln() - tau.ln() - (a2 - t2) / (2.0 * a2 * t2) * (t - c).powi(2)
        })
        .sum()
}

#[test]
fn gaussian_software_prior_term_matches_transcription() {
    let (a, tau, j) = (0.5, 2.0, 3);
    let h = HierarchicalH::new(j, tau, SoftwarePrior::Gaussian { scale: a }).unwrap();
    let mut rng = Rng::seed_from_u64(11);
    for _ in 0..50 {
        let gamma = -8.0 + 10.0 * rng.uniform();
        let on_diag: Vec<f64> = vec![gamma; j];
        let general: Vec<f64> = (0..j).map(|_| gamma + 3.0 * rng.normal()).collect();
        for theta in [on_diag, general] {
            let mut row = theta.clone();
            row.push(gamma);
            let got =
                UnnormalizedLogDensity::<f64>::log_density(&h, &Tensor::matrix(1, j + 1, row).unwrap()).unwrap()[0];
            let direct: f64 = theta
                .iter()
                .map(|&t| -0.5 * ((t - gamma) / tau).powi(2) - tau.ln() + 0.5 * (t / a).powi(2) + a.ln())
                .sum();
            assert!(
                (got - direct).abs() < 1e-12 * direct.abs().max(1.0),
                "{got} vs {direct}"
            );
            // The completed-square form drops a γ-only term per group.
            let missing = j as f64
                * (gamma * gamma / (2.0 * (a * a - tau * tau)) + ((2.0 * std::f64::consts::PI).sqrt() * a).ln());
            let printed = completed_square(&theta, gamma, a, tau);
            assert!((got - printed - missing).abs() < 1e-10 * got.abs().max(1.0));
        }
    }
    let x = points(6, 4, 2.0, 12);
    assert_grad_matches(&h, &x, 1e-6);
    assert!(HierarchicalH::new(3, 2.0, SoftwarePrior::Gaussian { scale: 0.0 }).is_err());
}

#[test]
fn hierarchical_composition_adds_fitted_term() {
    let mut rng = Rng::seed_from_u64(13);
    let cfg = FlowConfig {
        hidden: vec![4],
        ..FlowConfig::affine(2)
    };
    let mut g = FlowModel::build(3, &cfg, &mut rng).unwrap();
    g.initialize_identity();
    g.randomize_parameters(0.2, &mut rng);
    let prior = SoftwarePrior::Gaussian { scale: 0.5 };
    let t = hierarchical_composition(g.clone(), 2.0, prior).unwrap();
    let h = HierarchicalH::new(3, 2.0, prior).unwrap();
    let x = points(10, 4, 2.0, 14);
    let lg = g.log_prob(&x.select_columns(&[0, 1, 2])).unwrap();
    let lh = UnnormalizedLogDensity::<f64>::log_density(&h, &x).unwrap();
    for (r, v) in t.log_density(&x).unwrap().iter().enumerate() {
        assert!((v - (lh[r] + lg[r])).abs() < 1e-12);
    }
    assert_grad_matches(&t, &points(4, 4, 1.0, 15), 1e-5);
}

#[test]
fn gaussian_ratio_term() {
    let num = DiagonalGaussian::new(vec![0.0, 1.0], vec![2.0, 1.0]).unwrap();
    let den = DiagonalGaussian::new(vec![0.5, 0.0], vec![1.0, 3.0]).unwrap();
    let r = GaussianRatio::new(num.clone(), Some(den.clone())).unwrap();
    let x = points(5, 2, 1.0, 16);
    for (i, v) in r.log_density(&x).unwrap().iter().enumerate() {
        let want = num.log_prob(x.row(i)).unwrap() - den.log_prob(x.row(i)).unwrap();
        assert!((v - want).abs() < 1e-12);
    }
    assert_grad_matches(&r, &x, 1e-6);
    assert!(GaussianRatio::new(num, Some(DiagonalGaussian::standard(3))).is_err());
}

fn quick_stage(seed: u64, iterations: usize) -> StageConfig {
    StageConfig::new(
        FlowConfig {
            hidden: vec![16, 16],
            ..FlowConfig::spline_blocks()
        },
        TrainConfig {
            learning_rate: 5e-3,
            ..TrainConfig::new(iterations, seed)
        },
    )
}

#[test]
fn stage1_fit_of_standard_normal_draws() {
    let mut rng = Rng::seed_from_u64(17);
    let draws = DiagonalGaussian::<f64>::standard(1).sample(20_000, &mut rng);
    let set = SampleSet::new(SubvectorSpec::new("u", vec![0]), draws).unwrap();
    let cfg = StageConfig::new(FlowConfig::affine(2), TrainConfig::new(2000, 18));
    let fits = fit_stage1(&[set], &[cfg]).unwrap();
    let grid: Vec<f64> = (0..=60).map(|i| -3.0 + 0.1 * i as f64).collect();
    let lp = fits[0]
        .model
        .log_prob(&Tensor::matrix(grid.len(), 1, grid.clone()).unwrap())
        .unwrap();
    let worst = grid
        .iter()
        .zip(&lp)
        .map(|(&x, &l)| (l - normal_log_pdf(x, 0.0, 1.0)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "sup-norm {worst}");
}

#[test]
fn stage1_fits_are_independent_of_order() {
    let mut rng = Rng::seed_from_u64(19);
    let a = SampleSet::new(SubvectorSpec::new("a", vec![0]), points(500, 1, 1.0, 20)).unwrap();
    let b = SampleSet::new(SubvectorSpec::new("b", vec![1, 2]), points(400, 2, 2.0, 21)).unwrap();
    let _ = rng.next_u64();
    let (ca, cb) = (quick_stage(1, 30), quick_stage(2, 30));
    let ab = fit_stage1(&[a.clone(), b.clone()], &[ca.clone(), cb.clone()]).unwrap();
    let ba = fit_stage1(&[b, a], &[cb, ca]).unwrap();
    assert_eq!(ab[0].model, ba[1].model);
    assert_eq!(ab[1].model, ba[0].model);
    assert_eq!(ab[0].trace, ba[1].trace);
}

#[test]
fn stage1_errors_name_the_component() {
    let a = SampleSet::new(SubvectorSpec::new("a", vec![0]), points(50, 1, 1.0, 22)).unwrap();
    let mut bad = quick_stage(3, 5);
    bad.train.batch_size = 0;
    let r = fit_stage1(&[a.clone(), a], &[quick_stage(3, 5), bad]);
    assert!(matches!(r, Err(Error::Component { index: 1, .. })));
}

#[test]
fn stage2_recovers_analytic_gaussian() {
    let target = compose_target::<f64>(
        2,
        Some(Component::new(
            SubvectorSpec::new("h", vec![0, 1]),
            DiagonalGaussian::new(vec![-2.0, 1.0], vec![0.5, 1.5]).unwrap(),
        )),
        vec![],
        Combination::Product,
    )
    .unwrap();
    let cfg = StageConfig::new(
        FlowConfig::affine(2),
        TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::new(1500, 23)
        },
    );
    let (model, trace) = fit_stage2(&target, &cfg).unwrap();
    assert!(trace.last().unwrap().is_finite());
    let s = model.sample(20_000, &mut Rng::seed_from_u64(24)).unwrap();
    for (j, (m, sd)) in [(-2.0, 0.5), (1.0, 1.5)].into_iter().enumerate() {
        let c = s.column(j);
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
        assert!((mean - m).abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - sd).abs() < 0.05, "sd {}", var.sqrt());
    }
}

#[test]
fn composed_target_is_thread_safe_and_deterministic() {
    let t = compose_target(
        2,
        Some(Component::new(SubvectorSpec::new("h", vec![1]), Flat { dim: 1 })),
        vec![Component::new(
            SubvectorSpec::new("a", vec![0, 1]),
            DiagonalGaussian::standard(2),
        )],
        Combination::Product,
    )
    .unwrap();
    let x = points(100, 2, 1.0, 25);
    let base = t.log_density(&x).unwrap();
    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| assert_eq!(t.log_density(&x).unwrap(), base));
        }
    });
}
