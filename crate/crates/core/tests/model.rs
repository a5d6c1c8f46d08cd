use phtail::grad::{Linear, Tape, Tensor};
use phtail::model::{
    kl_gaussian, reparameterize, standard_normal, Decoder, DecoderKind, Hyper, VaeModel, LOGVAR_MAX, LOGVAR_MIN,
};
use phtail::ph::{log_pdf, CanonicalPH, UniformizationConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hyper(latent_dim: usize, phases: usize, data_dim: usize) -> Hyper {
    Hyper {
        latent_dim,
        phases,
        data_dim,
        beta: 1.0,
        hidden: 8,
        depth: 1,
    }
}

fn zero_all(model: &mut VaeModel) {
    for p in model.params_mut() {
        p.data_mut().fill(0.0);
    }
}

/// A PH model whose decoder ignores `z` and emits an exponential with `rate`.
fn frozen_exponential(rate: f64) -> VaeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = VaeModel::new(hyper(1, 1, 1), DecoderKind::Ph, &mut rng).unwrap();
    zero_all(&mut m);
    if let Decoder::Ph { lambda_head, .. } = &mut m.decoder {
        lambda_head.bias.data_mut()[0] = rate.exp_m1().ln();
    }
    m
}

fn last_layer(model: &mut VaeModel) -> &mut Linear {
    model.encoder.layers.last_mut().unwrap()
}

#[test]
fn zero_encoder_gives_standard_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = VaeModel::new(hyper(2, 3, 2), DecoderKind::Ph, &mut rng).unwrap();
    zero_all(&mut m);
    let x = Tensor::from_vec(2, 2, vec![0.5, 3.0, 10.0, 0.0]).unwrap();
    let (mu, lv) = m.encode(&x).unwrap();
    assert!(mu.data().iter().chain(lv.data()).all(|&v| v == 0.0));

    last_layer(&mut m).bias = Tensor::row(&[0.0, 0.0, 25.0, -40.0]);
    let (_, lv) = m.encode(&x).unwrap();
    assert_eq!(lv.row_slice(0), &[LOGVAR_MAX, LOGVAR_MIN]);
    assert_eq!((LOGVAR_MIN, LOGVAR_MAX), (-30.0, 20.0));

    let bad = Tensor::from_vec(1, 2, vec![f64::NAN, 1.0]).unwrap();
    assert!(m.encode(&bad).is_err());
    let neg = Tensor::from_vec(1, 2, vec![-1.0, 1.0]).unwrap();
    assert!(m.encode(&neg).is_err());
}

#[test]
fn reparameterize_gradient_in_logvar() {
    let (mu0, lv0, e0) = (0.3, -0.7, 1.3);
    let z = |lv: f64| {
        let mut t = Tape::new();
        let mu = t.leaf(Tensor::scalar(mu0));
        let l = t.leaf(Tensor::scalar(lv));
        let e = t.leaf(Tensor::scalar(e0));
        let z = reparameterize(&mut t, mu, l, e).unwrap();
        (t, l, z)
    };
    let (mut t, l, root) = z(lv0);
    assert!((t.value(root).item() - (mu0 + (lv0 / 2.0f64).exp() * e0)).abs() < 1e-15);
    t.backward(root).unwrap();
    let analytic = 0.5 * (lv0 / 2.0f64).exp() * e0;
    let h = 1e-6;
    let value = |lv: f64| {
        let (t, _, z) = z(lv);
        t.value(z).item()
    };
    let fd = (value(lv0 + h) - value(lv0 - h)) / (2.0 * h);
    assert!(((t.grad(l).item() - analytic) / analytic).abs() < 1e-12);
    assert!(((fd - analytic) / analytic).abs() < 1e-5);
}

#[test]
fn kl_closed_forms() {
    let kl = |mu: f64, lv: f64| {
        let mut t = Tape::inference();
        let m = t.leaf(Tensor::scalar(mu));
        let l = t.leaf(Tensor::scalar(lv));
        let k = kl_gaussian(&mut t, m, l).unwrap();
        t.value(k).item()
    };
    assert_eq!(kl(0.0, 0.0), 0.0);
    assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-15);
    assert!((kl(0.0, 4f64.ln()) - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-12);
}

#[test]
fn zero_gaussian_decoder_returns_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = VaeModel::new(hyper(2, 1, 2), DecoderKind::Gaussian, &mut rng).unwrap();
    zero_all(&mut m);
    if let Decoder::Gaussian { net } = &mut m.decoder {
        net.layers.last_mut().unwrap().bias = Tensor::row(&[1.5, -0.5, 0.25, 30.0]);
    }
    let (mu, lv) = m.decode_gaussian(&Tensor::from_vec(1, 2, vec![0.7, -2.0]).unwrap()).unwrap();
    assert_eq!(mu.data(), &[1.5, -0.5]);
    assert_eq!(lv.data(), &[0.25, LOGVAR_MAX]);
    assert!(m.decode_ph(&Tensor::zeros(1, 2)).is_err());
}

#[test]
fn zero_ph_heads_decode_uniform_weights_and_linear_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = VaeModel::new(hyper(2, 4, 1), DecoderKind::Ph, &mut rng).unwrap();
    zero_all(&mut m);
    let p = m.decode_ph(&Tensor::from_vec(1, 2, vec![0.3, 0.1]).unwrap()).unwrap();
    for (i, (&a, &l)) in p.alpha.data().iter().zip(p.lambda.data()).enumerate() {
        assert!((a - 0.25).abs() < 1e-15);
        assert!((l - (i + 1) as f64 * 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn elbo_of_frozen_exponential() {
    let m = frozen_exponential(1.0);
    let x = Tensor::scalar(1.0);
    let o = m.elbo(&x, &Tensor::scalar(0.4)).unwrap();
    assert!((o.elbo + 1.0).abs() < 1e-8, "{o:?}");
    assert_eq!(o.kl, 0.0);
}

#[test]
fn beta_weights_the_kl_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = VaeModel::new(hyper(2, 3, 2), DecoderKind::Ph, &mut rng).unwrap();
    let x = Tensor::from_vec(3, 2, vec![0.5, 1.0, 2.0, 0.1, 3.0, 7.0]).unwrap();
    let eps = standard_normal(3, 2, &mut rng);
    let o = m.elbo(&x, &eps).unwrap();
    assert!((o.elbo - (o.recon - o.kl)).abs() < 1e-12);
    m.hyper.beta = 0.0;
    let o0 = m.elbo(&x, &eps).unwrap();
    assert_eq!(o0.elbo, o0.recon);
    assert_eq!(o0.recon, o.recon);
}

#[test]
fn toy_elbo_gradient_matches_finite_differences() {
    for kind in [DecoderKind::Ph, DecoderKind::Gaussian] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = VaeModel::new(hyper(2, 3, 2), kind, &mut rng).unwrap();
        model.uniformization = UniformizationConfig {
            tolerance: 1e-13,
            max_terms: 100_000,
        };
        let x = Tensor::from_vec(4, 2, vec![0.3, 1.2, 2.5, 0.05, 0.9, 4.0, 1.7, 0.6]).unwrap();
        let model = model.with_data_scale(&x).unwrap();
        let eps = standard_normal(4, 2, &mut rng);
        let (_, grads) = model.loss_and_grads(&x, &eps).unwrap();
        let loss = |m: &VaeModel| -m.elbo(&x, &eps).unwrap().elbo;
        let mut worst: f64 = 0.0;
        for (k, g) in grads.iter().enumerate() {
            for i in 0..g.data().len() {
                let h = 1e-6;
                let bump = |d: f64| {
                    let mut m = model.clone();
                    m.params_mut()[k].data_mut()[i] += d;
                    loss(&m)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = g.data()[i];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-3, "{kind:?}: worst relative error {worst}");
    }
}

#[test]
fn generation_is_deterministic_and_sized() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = VaeModel::new(hyper(2, 3, 2), DecoderKind::Ph, &mut rng).unwrap();
    let draw = |seed, n| m.generate(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(1, 0).shape(), (0, 2));
    let a = draw(1, 500);
    assert_eq!(a.shape(), (500, 2));
    assert_eq!(a, draw(1, 500));
    assert_ne!(a, draw(2, 500));
    assert!(a.data().iter().all(|v| v.is_finite() && *v >= 0.0));

    let g = VaeModel::new(hyper(2, 1, 2), DecoderKind::Gaussian, &mut rng).unwrap();
    let t = g.generate(300, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(t.data().iter().all(|v| *v >= 0.0));
}

#[test]
fn frozen_decoder_generation_matches_its_mean() {
    let m = frozen_exponential(2.0);
    let n = 100_000;
    let x = m.generate(n, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let mean = x.data().iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "mean {mean}");
}

#[test]
fn scaled_likelihood_matches_decoded_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_vec(3, 2, vec![10.0, 0.2, 40.0, 0.5, 25.0, 0.1]).unwrap();
    let m = VaeModel::new(hyper(2, 4, 2), DecoderKind::Ph, &mut rng)
        .unwrap()
        .with_data_scale(&x)
        .unwrap();
    assert_eq!(m.scale, vec![25.0, 0.2]);
    let z = standard_normal(3, 2, &mut rng);
    let ll = m.log_likelihood(&x, &z).unwrap();
    let p = m.decode_ph(&z).unwrap();
    let cfg = UniformizationConfig::default();
    for r in 0..3 {
        for j in 0..2 {
            let span = j * 4..(j + 1) * 4;
            let ph = CanonicalPH::new(p.alpha.row_slice(r)[span.clone()].to_vec(), p.lambda.row_slice(r)[span].to_vec())
                .unwrap();
            let want = log_pdf(&ph, x.get(r, j), &cfg).unwrap();
            assert!((ll.get(r, j) - want).abs() < 1e-6 * want.abs().max(1.0));
        }
    }
}

#[test]
fn hyper_validation() {
    assert!(Hyper { phases: 0, ..Hyper::new(1) }.validate().is_err());
    assert!(Hyper { beta: -1.0, ..Hyper::new(1) }.validate().is_err());
    assert_eq!(Hyper::new(1).latent_dim, 2);
    assert_eq!(Hyper::new(5).latent_dim, 4);
    assert!("gaussian".parse::<DecoderKind>().is_ok());
    assert!("other".parse::<DecoderKind>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decoded_parameters_are_valid(seed in 0u64..1000, z in prop::collection::vec(-6.0f64..6.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = VaeModel::new(hyper(2, 5, 3), DecoderKind::Ph, &mut rng).unwrap();
        let p = m.decode_ph(&Tensor::from_vec(3, 2, z).unwrap()).unwrap();
        for r in 0..3 {
            for j in 0..3 {
                let a = &p.alpha.row_slice(r)[j * 5..(j + 1) * 5];
                let l = &p.lambda.row_slice(r)[j * 5..(j + 1) * 5];
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(l[0] > 0.0);
                prop_assert!(l.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
