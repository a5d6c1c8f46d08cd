use nalgebra::DMatrix;
use phtail::ph::{
    canonical_from_json, canonical_to_json, ccdf, cdf, general_from_json, general_to_json, laplace, log_pdf,
    matexp_uniformized, moment, pdf, poisson_weights, sample, sample_multivariate, CanonicalPH, GeneralPH,
    PhaseType, UniformizationConfig, LOG_PDF_FLOOR,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> UniformizationConfig {
    UniformizationConfig::default()
}

fn three_state() -> GeneralPH {
    GeneralPH::from_rows(
        vec![0.4, 0.0, 0.6],
        &[
            vec![-5.2, 3.0, 2.2],
            vec![1.2, -2.5, 0.5],
            vec![4.0, 2.3, -7.55],
        ],
    )
    .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn canonical_expansion_structure() {
    let g = CanonicalPH::exponential(2.0).unwrap().expand();
    assert_eq!(g.generator()[(0, 0)], -2.0);
    assert_eq!(g.exit_rates(), vec![2.0]);

    let g = CanonicalPH::erlang(2, 1.0).unwrap().expand();
    assert_eq!(g.generator(), &DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]));
    assert_eq!(g.exit_rates(), vec![0.0, 1.0]);

    let c = CanonicalPH::new(vec![0.3, 0.7, 0.0], vec![1.0, 1.5, 3.5]).unwrap();
    let g = c.expand();
    let want = DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 0.0, -1.5, 1.5, 0.0, 0.0, -3.5]);
    assert_eq!(g.generator(), &want);
    assert_eq!(g.exit_rates(), vec![0.0, 0.0, 3.5]);
    assert_eq!(g.to_canonical().unwrap(), c);
}

#[test]
fn canonical_rejects_invalid_parameters() {
    assert!(CanonicalPH::new(vec![0.5, 0.6], vec![1.0, 2.0]).is_err());
    assert!(CanonicalPH::new(vec![0.5, 0.5], vec![2.0, 1.0]).is_err());
    assert!(CanonicalPH::new(vec![1.0], vec![0.0]).is_err());
    assert!(CanonicalPH::new(vec![1.0], vec![f64::NAN]).is_err());
    assert!(CanonicalPH::new(vec![], vec![]).is_err());
}

#[test]
fn general_rejects_invalid_generators() {
    assert!(GeneralPH::from_rows(vec![1.0], &[vec![1.0]]).is_err());
    assert!(GeneralPH::from_rows(vec![0.5, 0.5], &[vec![-1.0, 2.0], vec![0.0, -1.0]]).is_err());
    assert!(GeneralPH::from_rows(vec![0.5, 0.5], &[vec![-1.0, -0.5], vec![0.0, -1.0]]).is_err());
}

#[test]
fn scalar_matrix_exponential() {
    let a = DMatrix::from_element(1, 1, -2.0);
    assert_eq!(matexp_uniformized(&a, 0.0, &cfg()).unwrap()[(0, 0)], 1.0);
    let e = matexp_uniformized(&a, 1.0, &cfg()).unwrap()[(0, 0)];
    assert!(rel(e, (-2.0f64).exp()) < 1e-8);
}

#[test]
fn matrix_exponential_matches_pade_oracle() {
    let a = three_state().generator().clone();
    for &x in &[0.1, 0.5, 1.0, 3.0] {
        let got = matexp_uniformized(&a, x, &cfg()).unwrap();
        let want = (&a * x).exp();
        let diff = (got - want).abs().max();
        assert!(diff < 1e-8, "x={x}: {diff}");
    }
}

#[test]
fn poisson_weights_cover_requested_mass() {
    let w = poisson_weights(3.0, &cfg()).unwrap();
    let total: f64 = w.iter().sum();
    assert!(1.0 - total < 1e-8);
    assert!(rel(w[0], (-3.0f64).exp()) < 1e-12);
    assert!(rel(w[2], 4.5 * (-3.0f64).exp()) < 1e-12);
    let capped = UniformizationConfig {
        tolerance: 1e-8,
        max_terms: 3,
    };
    assert!(poisson_weights(100.0, &capped).is_err());
}

#[test]
fn poisson_truncation_reaches_tight_and_long_tolerances() {
    let tight = UniformizationConfig {
        tolerance: 1e-15,
        max_terms: 10_000,
    };
    let w = poisson_weights(3.0, &tight).unwrap();
    assert!(w.len() < 40, "{}", w.len());
    let long = UniformizationConfig {
        tolerance: 1e-10,
        max_terms: 1_000_000,
    };
    let w = poisson_weights(1e5, &long).unwrap();
    let sd = 1e5f64.sqrt();
    assert!((w.len() as f64) < 1e5 + 10.0 * sd, "{}", w.len());
}

#[test]
fn density_examples() {
    let e2 = CanonicalPH::exponential(2.0).unwrap();
    assert!(rel(pdf(&e2, 1.0, &cfg()).unwrap(), 2.0 * (-2.0f64).exp()) < 1e-8);
    let erl = CanonicalPH::erlang(2, 1.0).unwrap();
    assert!(rel(pdf(&erl, 1.0, &cfg()).unwrap(), (-1.0f64).exp()) < 1e-8);
    assert!(rel(pdf(&three_state(), 0.0, &cfg()).unwrap(), 0.75) < 1e-12);
    assert!(pdf(&e2, -1.0, &cfg()).is_err());
    assert!(pdf(&e2, f64::INFINITY, &cfg()).is_err());
}

#[test]
fn distribution_examples() {
    let e2 = CanonicalPH::exponential(2.0).unwrap();
    assert_eq!(cdf(&three_state(), 0.0, &cfg()).unwrap(), 0.0);
    assert_eq!(ccdf(&three_state(), 0.0, &cfg()).unwrap(), 1.0);
    assert!(rel(cdf(&e2, 1.0, &cfg()).unwrap(), 1.0 - (-2.0f64).exp()) < 1e-8);
    let erl = CanonicalPH::erlang(2, 1.0).unwrap();
    assert!(rel(cdf(&erl, 2.0, &cfg()).unwrap(), 1.0 - 3.0 * (-2.0f64).exp()) < 1e-8);
}

#[test]
fn log_density_examples() {
    let e1 = CanonicalPH::exponential(1.0).unwrap();
    assert!((log_pdf(&e1, 1.0, &cfg()).unwrap() + 1.0).abs() < 1e-8);
    let e2 = CanonicalPH::exponential(2.0).unwrap();
    assert!((log_pdf(&e2, 1.0, &cfg()).unwrap() - (2f64.ln() - 2.0)).abs() < 1e-8);
    let far = CanonicalPH::new(vec![0.1; 10], vec![10.0; 10]).unwrap();
    let big = UniformizationConfig {
        tolerance: 1e-8,
        max_terms: 20_000_000,
    };
    let v = log_pdf(&far, 1e6, &big).unwrap();
    assert_eq!(v, LOG_PDF_FLOOR);
}

#[test]
fn moment_and_laplace_examples() {
    let e2 = CanonicalPH::exponential(2.0).unwrap();
    assert!(rel(moment(&e2, 1).unwrap(), 0.5) < 1e-12);
    assert!(rel(moment(&e2, 2).unwrap(), 0.5) < 1e-12);
    let erl = CanonicalPH::erlang(2, 1.0).unwrap();
    assert!(rel(moment(&erl, 1).unwrap(), 2.0) < 1e-12);
    assert!(moment(&erl, 0).is_err());
    assert!(rel(laplace(&e2, 2.0).unwrap(), 0.5) < 1e-12);
    assert!(rel(laplace(&erl, 1.0).unwrap(), 0.25) < 1e-12);
    assert!((laplace(&three_state(), 1e-12).unwrap() - 1.0).abs() < 1e-6);
    assert!(laplace(&e2, 0.0).is_err());
}

#[test]
fn sampler_mean_within_three_standard_errors() {
    let e2 = CanonicalPH::exponential(2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| sample(&e2, &mut rng).unwrap()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let se = 0.5 / (n as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn sampler_matches_erlang_cdf() {
    let erl = CanonicalPH::erlang(2, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut xs: Vec<f64> = (0..n).map(|_| sample(&erl, &mut rng).unwrap()).collect();
    xs.sort_by(f64::total_cmp);
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (1.0 + x) * (-x).exp();
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "ks {ks}");
}

#[test]
fn sampler_is_deterministic_per_seed() {
    let ph = three_state();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..100).map(|_| sample(&ph, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn multivariate_components_are_independent() {
    let phs = [CanonicalPH::exponential(1.0).unwrap(), CanonicalPH::erlang(3, 2.0).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| sample_multivariate(&phs, &mut rng).unwrap()).collect();
    let mean = |j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
    let (m0, m1) = (mean(0), mean(1));
    let cov = rows.iter().map(|r| (r[0] - m0) * (r[1] - m1)).sum::<f64>() / n as f64;
    let var = |j: usize, m: f64| rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
    let rho = cov / (var(0, m0) * var(1, m1)).sqrt();
    assert!(rho.abs() < 0.02, "rho {rho}");

    let mut a = ChaCha8Rng::seed_from_u64(1);
    let mut b = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(
        sample_multivariate(&phs, &mut a).unwrap(),
        sample_multivariate(&phs, &mut b).unwrap()
    );
    assert!(sample_multivariate::<CanonicalPH, _>(&[], &mut a).is_err());
}

#[test]
fn json_round_trips() {
    let c = CanonicalPH::new(vec![0.3, 0.7, 0.0], vec![1.0, 1.5, 3.5]).unwrap();
    assert_eq!(canonical_from_json(&canonical_to_json(&c)).unwrap(), c);
    let g = three_state();
    assert_eq!(general_from_json(&general_to_json(&g)).unwrap(), g);
    assert!(canonical_from_json(r#"{"alpha":[1.0],"lambda":[-1.0]}"#).is_err());
}

fn canonical_strategy() -> impl Strategy<Value = CanonicalPH> {
    (1usize..8).prop_flat_map(|m| {
        (
            prop::collection::vec(0.01f64..1.0, m),
            prop::collection::vec(0.05f64..3.0, m),
        )
            .prop_map(|(w, inc)| {
                let s: f64 = w.iter().sum();
                let alpha = w.iter().map(|v| v / s).collect();
                let lambda = inc
                    .iter()
                    .scan(0.0, |acc, v| {
                        *acc += v;
                        Some(*acc)
                    })
                    .collect();
                CanonicalPH::new(alpha, lambda).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cdf_is_monotone_and_bounded(ph in canonical_strategy(), a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (fl, fh) = (cdf(&ph, lo, &cfg()).unwrap(), cdf(&ph, hi, &cfg()).unwrap());
        prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
        prop_assert!(fl <= fh + 1e-12);
    }

    #[test]
    fn canonical_and_expanded_forms_agree(ph in canonical_strategy(), x in 0.0f64..4.0) {
        let g = ph.expand();
        let (a, b) = (pdf(&ph, x, &cfg()).unwrap(), pdf(&g, x, &cfg()).unwrap());
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        let (a, b) = (ccdf(&ph, x, &cfg()).unwrap(), ccdf(&g, x, &cfg()).unwrap());
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!((moment(&ph, 1).unwrap() - moment(&g, 1).unwrap()).abs() < 1e-9 * moment(&g, 1).unwrap());
    }

    #[test]
    fn density_integrates_to_distribution(ph in canonical_strategy(), x in 0.1f64..3.0) {
        // Composite Simpson on [0, x].
        let k = 400;
        let h = x / k as f64;
        let f = |t: f64| pdf(&ph, t, &cfg()).unwrap();
        let mut s = f(0.0) + f(x);
        for i in 1..k {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let integral = s * h / 3.0;
        prop_assert!((integral - cdf(&ph, x, &cfg()).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn first_moment_is_minus_laplace_slope(ph in canonical_strategy()) {
        let s = 1e-5;
        let slope = (laplace(&ph, s).unwrap() - laplace(&ph, 2.0 * s).unwrap()) / s;
        let m1 = moment(&ph, 1).unwrap();
        prop_assert!((slope - m1).abs() < 1e-3 * m1.max(1.0));
    }
}
