use super::*;

fn chain(dim: usize, kinds: &[LayerKind], seed: u64, scale: f64) -> FlowModel<f64> {
    let cfg = FlowConfig {
        layers: kinds.to_vec(),
        hidden: vec![16, 16],
        ..FlowConfig::default()
    };
    let mut rng = Rng::seed_from_u64(seed);
    let mut m = FlowModel::build(dim, &cfg, &mut rng).unwrap();
    m.randomize_parameters(scale, &mut rng);
    m
}

fn base_draws(n: usize, d: usize, seed: u64, sd: f64) -> Tensor<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    Tensor::matrix(n, d, (0..n * d).map(|_| sd * rng.normal()).collect()).unwrap()
}

#[test]
fn empty_chain_is_identity() {
    let m = FlowModel::<f64>::identity(2);
    let u = base_draws(5, 2, 1, 1.0);
    let (x, ld) = m.forward(&u).unwrap();
    assert_eq!(x, u);
    assert!(ld.iter().all(|v| *v == 0.0));
}

#[test]
fn actnorm_hand_example() {
    let l = ActNorm::with_params(vec![2f64.ln(), 2f64.ln()], vec![0.0, 0.0]).unwrap();
    let m = FlowModel::new(DiagonalGaussian::standard(2), vec![Transform::ActNorm(l)]).unwrap();
    let (x, ld) = m.forward(&Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
    assert!((x.data()[0] - 2.0).abs() < 1e-15 && (x.data()[1] - 2.0).abs() < 1e-15);
    assert!((ld[0] - 1.386_294).abs() < 1e-6);
}

#[test]
fn identity_log_prob_at_origin() {
    let m = FlowModel::<f64>::identity(2);
    let lp = m.log_prob(&Tensor::zeros(&[1, 2])).unwrap();
    assert!((lp[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
}

#[test]
fn actnorm_log_prob_is_affine_gaussian() {
    let (s, b) = (1.7f64, -0.4f64);
    let l = ActNorm::with_params(vec![s.ln()], vec![b]).unwrap();
    let m = FlowModel::new(DiagonalGaussian::standard(1), vec![Transform::ActNorm(l)]).unwrap();
    let x = base_draws(50, 1, 2, 3.0);
    let lp = m.log_prob(&x).unwrap();
    let g = DiagonalGaussian::new(vec![b], vec![s]).unwrap();
    for (i, v) in lp.iter().enumerate() {
        assert!((v - g.log_prob(x.row(i)).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn actnorm_sampling_moments() {
    let l = ActNorm::with_params(vec![2f64.ln()], vec![3.0]).unwrap();
    let m = FlowModel::new(DiagonalGaussian::standard(1), vec![Transform::ActNorm(l)]).unwrap();
    let x = m.sample(100_000, &mut Rng::seed_from_u64(3)).unwrap();
    let col = x.column(0);
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
    assert!((mean - 3.0).abs() < 0.02);
    assert!((sd - 2.0).abs() < 0.02);
}

#[test]
fn round_trip_and_logdet_negation_per_layer_kind() {
    use LayerKind::*;
    let cases: [(&[LayerKind], f64); 5] = [
        (&[ActNorm], 1e-8),
        (&[AffineCoupling, AffineCoupling], 1e-8),
        (&[Permutation], 1e-8),
        (&[RqSpline], 1e-6),
        (&[RqSpline, ActNorm, Permutation, AffineCoupling, RqSpline], 1e-6),
    ];
    for d in 1..=3 {
        for (i, (kinds, tol)) in cases.iter().enumerate() {
            let m = chain(d, kinds, 10 + i as u64, 0.25);
            let u = base_draws(1000, d, 20 + i as u64, 2.5);
            let (x, ldf) = m.forward(&u).unwrap();
            let (back, ldi) = m.inverse(&x).unwrap();
            let err = u
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < *tol, "{kinds:?} d={d}: {err}");
            for (a, b) in ldf.iter().zip(&ldi) {
                assert!((a + b).abs() < 1e-8, "{kinds:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn logdet_matches_numeric_jacobian() {
    use LayerKind::*;
    let all: [&[LayerKind]; 5] = [
        &[ActNorm],
        &[AffineCoupling, AffineCoupling, ActNorm],
        &[Permutation, ActNorm],
        &[RqSpline],
        &[RqSpline, ActNorm, Permutation, RqSpline],
    ];
    for d in 1..=3 {
        for (i, kinds) in all.iter().enumerate() {
            let m = chain(d, kinds, 40 + i as u64, 0.25);
            let u = base_draws(20, d, 50 + i as u64, 1.5);
            let (_, ld) = m.forward(&u).unwrap();
            for r in 0..20 {
                let num = numeric_log_det_jacobian(&m, u.row(r), 1e-6).unwrap();
                assert!((num - ld[r]).abs() < 1e-4, "{kinds:?} d={d}: {num} vs {}", ld[r]);
            }
        }
    }
}

#[test]
fn fresh_affine_model_log_prob_is_exactly_base() {
    let mut rng = Rng::seed_from_u64(7);
    let mut m = FlowModel::<f64>::build(3, &FlowConfig::affine(3), &mut rng).unwrap();
    m.initialize_identity();
    let x = base_draws(30, 3, 9, 2.0);
    let base = DiagonalGaussian::<f64>::standard(3);
    for (r, v) in m.log_prob(&x).unwrap().iter().enumerate() {
        assert_eq!(*v, base.log_prob(x.row(r)).unwrap());
    }
}

/// Zero spline parameters give the identity up to rounding in the knot sums.
#[test]
fn fresh_model_log_prob_equals_base() {
    let mut rng = Rng::seed_from_u64(8);
    for cfg in [FlowConfig::affine(3), FlowConfig::spline_blocks_permuted()] {
        let mut m = FlowModel::<f64>::build(3, &cfg, &mut rng).unwrap();
        m.initialize_identity();
        let x = base_draws(30, 3, 9, 2.0);
        let lp = m.log_prob(&x).unwrap();
        let base = DiagonalGaussian::<f64>::standard(3);
        for (r, v) in lp.iter().enumerate() {
            assert!((v - base.log_prob(x.row(r)).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn coupling_keeps_masked_coordinates() {
    let m = chain(3, &[LayerKind::AffineCoupling], 4, 0.7);
    let u = base_draws(10, 3, 5, 1.0);
    let (x, ld) = m.forward(&u).unwrap();
    let Transform::AffineCoupling(c) = &m.layers()[0] else {
        unreachable!()
    };
    for r in 0..10 {
        for j in 0..3 {
            if c.mask()[j] {
                assert_eq!(x.row(r)[j], u.row(r)[j]);
            }
        }
        // Only one coordinate moves, so the log-det is its log-slope.
        let moved = (0..3).find(|j| !c.mask()[*j]).unwrap();
        let num = numeric_log_det_jacobian(&m, u.row(r), 1e-6).unwrap();
        assert!((num - ld[r]).abs() < 1e-7);
        assert_ne!(x.row(r)[moved], u.row(r)[moved]);
    }
}

#[test]
fn actnorm_data_init_standardizes() {
    let mut rng = Rng::seed_from_u64(6);
    let mut m = FlowModel::<f64>::build(2, &FlowConfig::affine(2), &mut rng).unwrap();
    let data = Tensor::matrix(
        500,
        2,
        (0..1000)
            .map(|i| {
                if i % 2 == 0 {
                    3.0 + 2.0 * rng.normal()
                } else {
                    -1.0 + 0.1 * rng.normal()
                }
            })
            .collect(),
    )
    .unwrap();
    assert!(m.log_prob(&data).is_err());
    m.initialize_from_data(&data).unwrap();
    let (u, _) = m.inverse(&data).unwrap();
    for j in 0..2 {
        let c = u.column(j);
        let mean = c.iter().sum::<f64>() / 500.0;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn non_finite_intermediate_names_the_layer() {
    let big = ActNorm::with_params(vec![800.0], vec![0.0]).unwrap();
    let m = FlowModel::new(
        DiagonalGaussian::standard(1),
        vec![Transform::Permutation(Permutation::reverse(1)), Transform::ActNorm(big)],
    )
    .unwrap();
    match m.forward(&Tensor::matrix(1, 1, vec![1.0]).unwrap()) {
        Err(Error::Layer { index, .. }) => assert_eq!(index, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let m = FlowModel::<f64>::identity(2);
    assert!(matches!(
        m.log_prob(&Tensor::zeros(&[3, 3])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = chain(
        3,
        &[
            LayerKind::RqSpline,
            LayerKind::ActNorm,
            LayerKind::Permutation,
            LayerKind::AffineCoupling,
        ],
        12,
        0.3,
    );
    let text = m.to_checkpoint_string().unwrap();
    let back = FlowModel::<f64>::from_checkpoint_str(&text).unwrap();
    assert_eq!(back, m);
    let x = base_draws(1000, 3, 13, 2.0);
    let (a, b) = (m.log_prob(&x).unwrap(), back.log_prob(&x).unwrap());
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn checkpoint_version_is_checked() {
    let m = FlowModel::<f64>::identity(2);
    let text = m
        .to_checkpoint_string()
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 7");
    assert!(matches!(
        FlowModel::<f64>::from_checkpoint_str(&text),
        Err(Error::Version { found: 7, .. })
    ));
    assert!(matches!(
        FlowModel::<f64>::from_checkpoint_str("{ not json"),
        Err(Error::Corrupt(_))
    ));
}

#[test]
fn identity_checkpoint_is_base_density() {
    let m = FlowModel::<f64>::identity(2);
    let back = FlowModel::<f64>::from_checkpoint_str(&m.to_checkpoint_string().unwrap()).unwrap();
    let lp = back.log_prob(&Tensor::zeros(&[1, 2])).unwrap();
    assert!((lp[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let m = chain(
        2,
        &[LayerKind::RqSpline, LayerKind::ActNorm, LayerKind::AffineCoupling],
        14,
        0.4,
    );
    let x = base_draws(5, 2, 15, 1.0);
    let (v, g) = m.log_density_grad(&x).unwrap();
    let eps = 1e-6;
    for r in 0..5 {
        for j in 0..2 {
            let mut up = x.row(r).to_vec();
            let mut dn = up.clone();
            up[j] += eps;
            dn[j] -= eps;
            let f = |p: Vec<f64>| m.log_prob(&Tensor::matrix(1, 2, p).unwrap()).unwrap()[0];
            let num = (f(up) - f(dn)) / (2.0 * eps);
            assert!((num - g.row(r)[j]).abs() < 1e-6);
        }
        assert_eq!(v[r], m.log_prob(&x.slice_rows(r, r + 1)).unwrap()[0]);
    }
}
