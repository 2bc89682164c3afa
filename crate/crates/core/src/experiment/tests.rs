use std::fs;

use super::*;
use crate::dist::SoftwarePrior;
use crate::flow::FlowConfig;
use crate::train::TrainConfig;
use crate::twostage::StageConfig;

#[test]
fn sha256_known_vector() {
    assert_eq!(
        sha256_hex(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn derived_seeds_are_stable_and_distinct() {
    assert_eq!(derive_seed(7, "stage1"), derive_seed(7, "stage1"));
    assert_ne!(derive_seed(7, "stage1"), derive_seed(7, "stage2"));
    assert_ne!(derive_seed(7, "stage1"), derive_seed(8, "stage1"));
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = Bundle::create(&dir.path().join("out")).unwrap();
    fs::write(b.file("a.txt"), "abc").unwrap();
    fs::write(b.file("b.csv"), "x\n1\n").unwrap();
    b.file("a.txt");
    let entries = b.finish().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].file, "a.txt");
    assert_eq!(entries[0].bytes, 3);
    assert_eq!(entries[0].sha256, sha256_hex(b"abc"));
    let text = fs::read_to_string(dir.path().join("out").join(MANIFEST)).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("file,bytes,sha256\n"));
}

#[test]
fn metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Metrics::new();
    m.push("alpha", 0.5);
    m.push("beta", -2.0);
    assert_eq!(m.get("beta"), Some(-2.0));
    assert_eq!(m.get("gamma"), None);
    let p = dir.path().join("m.csv");
    m.write_csv(&p).unwrap();
    assert_eq!(
        fs::read_to_string(&p).unwrap(),
        "metric,value\nalpha,5.0000000000000000e-1\nbeta,-2.0000000000000000e0\n"
    );
}

#[test]
fn histogram_is_a_density() {
    let mut rng = crate::Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..20_000).map(|_| rng.uniform()).collect();
    let b: Vec<f64> = (0..20_000).map(|_| rng.uniform()).collect();
    let rows = histogram2d(&a, &b, (0.0, 1.0), (0.0, 1.0), 10);
    assert_eq!(rows.len(), 100);
    let total: f64 = rows.iter().map(|r| r[2].parse::<f64>().unwrap() * 0.01).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let half = histogram2d(&a, &b, (0.0, 0.5), (0.0, 1.0), 10);
    let inside: f64 = half.iter().map(|r| r[2].parse::<f64>().unwrap() * 0.005).sum();
    assert!((inside - 0.5).abs() < 0.02);
}

#[test]
fn grid_endpoints() {
    let g = grid(-1.0, 1.0, 5);
    assert_eq!(g, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
}

#[test]
fn config_loading() {
    let dir = tempfile::tempdir().unwrap();
    let d: HierConfig = load_config(None).unwrap();
    assert_eq!(d, HierConfig::default());
    let p = dir.path().join("hier.toml");
    fs::write(&p, "variant = \"j6-flat\"\nseed = 9\n[stage2.train]\niterations = 10\n").unwrap();
    let c: HierConfig = load_config(Some(&p)).unwrap();
    assert_eq!(c.variant, HierVariant::J6Flat);
    assert_eq!(c.seed, 9);
    assert_eq!(c.stage2.train.iterations, 10);
    assert_eq!(c.stage2.flow, FlowConfig::affine(3));
    fs::write(&p, "sede = 9\n").unwrap();
    let e = load_config::<HierConfig>(Some(&p)).unwrap_err();
    assert_eq!(e.category(), "input");
    assert!(e.to_string().contains("hier.toml"), "{e}");
    let e = load_config::<HierConfig>(Some(&dir.path().join("missing.toml"))).unwrap_err();
    assert_eq!(e.category(), "io");
}

fn quick_stage(iterations: usize) -> StageConfig {
    StageConfig::new(
        FlowConfig {
            hidden: vec![16, 16],
            ..FlowConfig::affine(2)
        },
        TrainConfig {
            learning_rate: 5e-3,
            ..TrainConfig::new(iterations, 0)
        },
    )
}

fn write_normal_draws(path: &std::path::Path, n: usize, seed: u64) {
    let mut rng = crate::Rng::seed_from_u64(seed);
    let mut text = String::from("x\n");
    for _ in 0..n {
        text.push_str(&format!("{}\n", rng.normal()));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn two_stage_spec_reports_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ragged.csv"), "a,b\n1,2\n3,4\n5\n").unwrap();
    let spec = TwoStageSpec {
        dim: 3,
        analytic: Some(AnalyticSpec::HierarchicalH {
            indices: vec![1, 2],
            tau: -1.0,
            prior: SoftwarePrior::Flat,
        }),
        components: vec![
            ComponentFile {
                name: "a".into(),
                indices: vec![1, 2],
                data: "ragged.csv".into(),
                stage: StageConfig::default(),
            },
            ComponentFile {
                name: "b".into(),
                indices: vec![4],
                data: "missing.csv".into(),
                stage: StageConfig::default(),
            },
        ],
        ..TwoStageSpec::default()
    };
    let err = run_two_stage(&spec, dir.path(), &dir.path().join("out")).unwrap_err();
    let crate::Error::Spec(problems) = &err else {
        panic!("{err}");
    };
    assert_eq!(problems.len(), 4, "{problems:#?}");
    assert!(problems[0].contains("tau"), "{}", problems[0]);
    assert!(problems[1].contains("ragged.csv:4"), "{}", problems[1]);
    assert!(problems[1].contains("expected 2 fields, found 1"), "{}", problems[1]);
    assert!(problems[2].starts_with("b:"), "{}", problems[2]);
    assert!(problems[3].contains("missing.csv"), "{}", problems[3]);
    assert_eq!(err.category(), "input");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn two_stage_spec_checks_cover_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    write_normal_draws(&dir.path().join("x.csv"), 50, 1);
    let spec = TwoStageSpec {
        dim: 2,
        components: vec![ComponentFile {
            name: "x".into(),
            indices: vec![1],
            data: "x.csv".into(),
            stage: StageConfig::default(),
        }],
        combination: generic::CombinationSpec::Mixture {
            weights: vec![0.3, 0.3],
        },
        ..TwoStageSpec::default()
    };
    let Err(crate::Error::Spec(p)) = run_two_stage(&spec, dir.path(), dir.path()) else {
        panic!("expected a spec error");
    };
    assert!(p.iter().any(|m| m.contains("coordinate 2")), "{p:?}");
    assert!(p.iter().any(|m| m.contains("2 weights for 1 components")), "{p:?}");
    assert!(p.iter().any(|m| m.contains("sum to")), "{p:?}");
}

#[test]
fn two_stage_spec_parses_from_toml() {
    let text = r#"
dim = 3
seed = 4

[analytic]
kind = "quartic-reciprocal"
indices = [1]

[[components]]
name = "xy"
indices = [1, 2]
data = "xy.csv"

[[components]]
name = "xz"
indices = [1, 3]
data = "xz.csv"
[components.stage.train]
iterations = 50

[stage2.flow]
layers = ["rq-spline", "act-norm", "permutation", "rq-spline", "act-norm"]
"#;
    let s: TwoStageSpec = toml::from_str(text).unwrap();
    assert_eq!(s.components.len(), 2);
    assert_eq!(s.components[1].stage.train.iterations, 50);
    assert_eq!(s.analytic, Some(AnalyticSpec::QuarticReciprocal { indices: vec![1] }));
    assert_eq!(s.stage2.flow.layers, FlowConfig::spline_blocks_permuted().layers);
    let g: TwoStageSpec = toml::from_str(
        "dim = 1\n[analytic]\nkind = \"custom-gaussian-ratio\"\nindices = [1]\nnumerator_mean = [0.0]\nnumerator_sd = [1.0]\n",
    )
    .unwrap();
    assert!(matches!(g.analytic, Some(AnalyticSpec::CustomGaussianRatio { .. })));
    assert!(toml::from_str::<TwoStageSpec>("dim = 1\n[analytic]\nkind = \"nope\"\nindices = [1]\n").is_err());
    let m: TwoStageSpec = toml::from_str("dim = 1\n[combination]\nkind = \"mixture\"\nweights = [0.5, 0.5]\n").unwrap();
    assert_eq!(
        m.combination,
        generic::CombinationSpec::Mixture {
            weights: vec![0.5, 0.5]
        }
    );
}

#[test]
fn degenerate_two_stage_run_reproduces_stage1() {
    let dir = tempfile::tempdir().unwrap();
    write_normal_draws(&dir.path().join("x.csv"), 4000, 2);
    let spec = TwoStageSpec {
        dim: 1,
        analytic: Some(AnalyticSpec::Flat { indices: vec![1] }),
        components: vec![ComponentFile {
            name: "x".into(),
            indices: vec![1],
            data: "x.csv".into(),
            stage: quick_stage(1500),
        }],
        stage2: quick_stage(1500),
        samples: 20_000,
        ..TwoStageSpec::default()
    };
    let out = dir.path().join("out");
    let r = run_two_stage(&spec, dir.path(), &out).unwrap();
    assert!(r.log_normalizer.abs() < 0.02, "{}", r.log_normalizer);
    let diff = r.metrics.get("max_abs_route_difference").unwrap();
    assert!(diff < 0.1, "{diff}");
    let names: Vec<&str> = r.manifest.iter().map(|e| e.file.as_str()).collect();
    assert_eq!(
        names,
        [
            "stage1_x.json",
            "loss_stage1_x.csv",
            "stage2.json",
            "loss_stage2.csv",
            "samples.csv",
            "density_query.csv",
            "metrics.csv"
        ]
    );
    let q = fs::read_to_string(out.join("density_query.csv")).unwrap();
    assert_eq!(
        q.lines().next().unwrap(),
        "x_1,log_composed,log_composed_normalized,log_stage2"
    );
    assert_eq!(q.lines().count(), 101);
}

#[test]
fn tsfb_command_scores_against_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let y = vec![-5.0, -4.0, -6.0];
    let pool = crate::dist::sample_software_posterior_with(
        &y,
        SoftwarePrior::Flat,
        1.0,
        2000,
        &mut crate::Rng::seed_from_u64(3),
    )
    .unwrap();
    crate::io::write_matrix(&dir.path().join("pool.csv"), &["a", "b", "c"], &pool).unwrap();
    let cfg = TsfbRunConfig {
        pool: "pool.csv".into(),
        iterations: 2000,
        y: Some(y),
        sigma: Some(1.0),
        ..TsfbRunConfig::default()
    };
    let m = run_tsfb(&cfg, dir.path(), &dir.path().join("out")).unwrap();
    assert_eq!(
        m.iter().map(|e| e.file.as_str()).collect::<Vec<_>>(),
        ["chain.csv", "errors.csv", "metrics.csv"]
    );
    let bad = TsfbRunConfig { y: None, ..cfg.clone() };
    assert!(run_tsfb(&bad, dir.path(), &dir.path().join("out2")).is_err());
    let empty = TsfbRunConfig::default();
    assert_eq!(
        run_tsfb(&empty, dir.path(), dir.path()).unwrap_err().category(),
        "input"
    );
}

#[test]
fn oracle_report_self_test_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = OracleReportConfig::default();
    run_oracle_report(&cfg, dir.path(), &dir.path().join("out")).unwrap();
    let text = fs::read_to_string(dir.path().join("out/errors.csv")).unwrap();
    let errors: Vec<f64> = text
        .lines()
        .skip(1)
        .flat_map(|l| {
            l.split(',')
                .skip(2)
                .filter(|v| !v.is_empty())
                .map(|v| v.parse::<f64>().unwrap())
                .collect::<Vec<_>>()
        })
        .collect();
    assert_eq!(errors.len(), 9);
    assert!(errors.iter().all(|e| e.abs() < 0.03), "{errors:?}");
    let exact = fs::read_to_string(dir.path().join("out/exact_posterior.csv")).unwrap();
    let gamma: Vec<&str> = exact.lines().nth(4).unwrap().split(',').collect();
    assert_eq!(gamma[0], "gamma");
    assert!((gamma[1].parse::<f64>().unwrap() + 5.2).abs() < 1e-12);
}

#[test]
fn gradcheck_suite_passes_on_a_few_draws() {
    let cfg = GradcheckConfig {
        draws: 3,
        ..GradcheckConfig::default()
    };
    let (rows, _) = run_gradcheck(&cfg, None).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn empty_documents_give_defaults_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.toml");
    fs::write(&p, "").unwrap();
    assert_eq!(load_config::<JointConfig>(Some(&p)).unwrap(), JointConfig::default());
    assert_eq!(load_config::<HierConfig>(Some(&p)).unwrap(), HierConfig::default());
    assert_eq!(load_config::<TwoStageSpec>(Some(&p)).unwrap(), TwoStageSpec::default());
    assert_eq!(
        load_config::<TsfbRunConfig>(Some(&p)).unwrap(),
        TsfbRunConfig::default()
    );
    assert_eq!(
        load_config::<OracleReportConfig>(Some(&p)).unwrap(),
        OracleReportConfig::default()
    );
    assert_eq!(
        load_config::<GradcheckConfig>(Some(&p)).unwrap(),
        GradcheckConfig::default()
    );
    fs::write(
        &p,
        "y = [1.0, 2.0]\nsigma = 0.5\n[prior]\nkind = \"gaussian\"\nscale = 0.5\n",
    )
    .unwrap();
    let t: TsfbRunConfig = load_config(Some(&p)).unwrap();
    assert_eq!(t.y, Some(vec![1.0, 2.0]));
    assert_eq!(t.prior, SoftwarePrior::Gaussian { scale: 0.5 });
}
