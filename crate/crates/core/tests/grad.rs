use phtail::grad::{Activation, MlpParams, Tape, Tensor, Var};
use phtail::ph::{canonical_log_pdf_grad, UniformizationConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst mixed absolute/relative gap between the reverse-mode gradient of
/// the scalar `f(x)` and central differences.
fn check_unary(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let eval = |v: &Tensor| {
        let mut t = Tape::new();
        let leaf = t.leaf(v.clone());
        let out = f(&mut t, leaf);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let leaf = t.leaf(x.clone());
    let out = f(&mut t, leaf);
    t.backward(out).unwrap();
    let g = t.grad(leaf);
    let mut worst: f64 = 0.0;
    for i in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let fd = (eval(&p) - eval(&m)) / (2.0 * H);
        let (a, b) = (g.data()[i], fd);
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
    }
    worst
}

fn weights(n: usize) -> Tensor {
    Tensor::from_vec(1, n, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap()
}

/// Weighted sum so every output entry carries a distinct adjoint.
fn reduce(t: &mut Tape, y: Var) -> Var {
    let n = t.value(y).data().len();
    let (r, c) = t.value(y).shape();
    let w = t.leaf(Tensor::from_vec(r, c, weights(n).into_data()).unwrap());
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

#[test]
fn primitive_values() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0));
    let y = t.softplus(x);
    assert!((t.value(y).item() - 2f64.ln()).abs() < 1e-15);
    t.backward(y).unwrap();
    assert!((t.grad(x).item() - 0.5).abs() < 1e-15);

    let mut t = Tape::new();
    let v = t.leaf(Tensor::row(&[0.0, 0.0, 0.0]));
    let s = t.softmax(v, 3).unwrap();
    for &p in t.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let c = t.leaf(Tensor::row(&[1.0, 0.5, 2.0]));
    let cs = t.cumsum(c, 3).unwrap();
    assert_eq!(t.value(cs).data(), &[1.0, 1.5, 3.5]);
}

#[test]
fn product_rule_and_constant_root() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let y = t.leaf(Tensor::scalar(3.0));
    let p = t.mul(x, y).unwrap();
    t.backward(p).unwrap();
    assert_eq!(t.grad(x).item(), 3.0);
    assert_eq!(t.grad(y).item(), 2.0);

    let mut t = Tape::new();
    let v = t.leaf(Tensor::row(&[0.3, -1.2, 2.0, 0.1]));
    let s = t.softmax(v, 4).unwrap();
    let total = t.sum(s);
    t.backward(total).unwrap();
    assert!(t.grad(v).data().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn backward_rejects_non_scalar_roots_and_inference_tapes() {
    let mut t = Tape::new();
    let v = t.leaf(Tensor::row(&[1.0, 2.0]));
    assert!(t.backward(v).is_err());
    let mut t = Tape::inference();
    let v = t.leaf(Tensor::scalar(1.0));
    let e = t.exp(v);
    assert!(t.backward(e).is_err());
}

#[test]
fn ph_log_pdf_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = UniformizationConfig {
        tolerance: 1e-14,
        max_terms: 100_000,
    };
    let m = 5;
    for _ in 0..20 {
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        let alpha: Vec<f64> = w.iter().map(|v| v / s).collect();
        let mut lambda: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..4.0)).collect();
        lambda.sort_by(f64::total_cmp);
        let x: f64 = rng.random_range(0.05..4.0);

        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(&alpha));
        let l = t.leaf(Tensor::row(&lambda));
        let out = t.ph_log_pdf(a, l, &Tensor::scalar(x), m, &cfg).unwrap();
        let root = t.sum(out);
        t.backward(root).unwrap();
        let (ga, gl) = (t.grad(a), t.grad(l));

        let f = |al: &[f64], la: &[f64]| canonical_log_pdf_grad(al, la, x, &cfg, false).unwrap().value;
        for i in 0..m {
            let h = 1e-5 * alpha[i];
            let (mut p, mut q) = (alpha.clone(), alpha.clone());
            p[i] += h;
            q[i] -= h;
            let fd = (f(&p, &lambda) - f(&q, &lambda)) / (2.0 * h);
            assert!(rel_err(ga.data()[i], fd) < 1e-4, "alpha {i}: {} vs {fd}", ga.data()[i]);

            let h = 1e-5 * lambda[i];
            let (mut p, mut q) = (lambda.clone(), lambda.clone());
            p[i] += h;
            q[i] -= h;
            let fd = (f(&alpha, &p) - f(&alpha, &q)) / (2.0 * h);
            assert!(rel_err(gl.data()[i], fd) < 1e-4, "lambda {i}: {} vs {fd}", gl.data()[i]);
        }
    }
}

#[test]
fn ph_log_pdf_broadcasts_a_single_parameter_row() {
    let cfg = UniformizationConfig::default();
    let mut t = Tape::new();
    let a = t.leaf(Tensor::row(&[0.5, 0.5]));
    let l = t.leaf(Tensor::row(&[1.0, 2.0]));
    let x = Tensor::from_vec(3, 1, vec![0.5, 1.0, 2.0]).unwrap();
    let out = t.ph_log_pdf(a, l, &x, 2, &cfg).unwrap();
    assert_eq!(t.value(out).shape(), (3, 1));
    let bad = Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
    assert!(t.ph_log_pdf(a, l, &bad, 2, &cfg).is_err());
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for act in [Activation::Tanh, Activation::Softplus] {
        let params = MlpParams::new(&[3, 5, 4, 2], act, &mut rng).unwrap();
        let x = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mean_out = |p: &MlpParams| {
            let mut t = Tape::new();
            let b = p.bind(&mut t);
            let xv = t.leaf(x.clone());
            let y = b.forward(&mut t, xv).unwrap();
            let root = t.mean(y);
            (t, b, root)
        };
        let (mut t, b, root) = mean_out(&params);
        t.backward(root).unwrap();
        let grads: Vec<Tensor> = b.vars().map(|v| t.grad(v)).collect();
        for (k, g) in grads.iter().enumerate() {
            for i in 0..g.data().len() {
                let bump = |d: f64| {
                    let mut p = params.clone();
                    p.params_mut().nth(k).unwrap().data_mut()[i] += d;
                    let (t, _, root) = mean_out(&p);
                    t.value(root).item()
                };
                let fd = (bump(H) - bump(-H)) / (2.0 * H);
                assert!(rel_err(g.data()[i], fd) < 1e-4, "{act:?} tensor {k} entry {i}");
            }
        }
        assert_eq!(params.forward_plain(&x).unwrap().shape(), (4, 2));
    }
}

fn small_tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_ops_match_finite_differences(x in small_tensor(2, 3)) {
        let e = check_unary(x.clone(), |t, v| { let y = t.exp(v); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.tanh(v); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.softplus(v); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.square(v); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.scale(v, -1.7); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.add_scalar(v, 0.4); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.neg(v); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.map(|v| v.abs() + 0.1), |t, v| { let y = t.log(v); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
    }

    #[test]
    fn grouped_ops_match_finite_differences(x in small_tensor(2, 6)) {
        let e = check_unary(x.clone(), |t, v| { let y = t.softmax(v, 3).unwrap(); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.cumsum(v, 2).unwrap(); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.sum_cols(v); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| { let y = t.slice_cols(v, 1, 4).unwrap(); reduce(t, y) });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(x.clone(), |t, v| t.mean(v));
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
    }

    #[test]
    fn binary_ops_match_finite_differences(a in small_tensor(3, 2), b in small_tensor(2, 4), r in small_tensor(1, 2)) {
        let (b2, r2) = (b.clone(), r.clone());
        let e = check_unary(a.clone(), move |t, v| {
            let w = t.leaf(b2.clone());
            let y = t.matmul(v, w).unwrap();
            reduce(t, y)
        });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let a2 = a.clone();
        let e = check_unary(b.clone(), move |t, w| {
            let v = t.leaf(a2.clone());
            let y = t.matmul(v, w).unwrap();
            reduce(t, y)
        });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let a3 = a.clone();
        let e = check_unary(r.clone(), move |t, row| {
            let v = t.leaf(a3.clone());
            let y = t.add_row(v, row).unwrap();
            let z = t.square(y);
            reduce(t, z)
        });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
        let e = check_unary(a.clone(), move |t, v| {
            let row = t.leaf(r2.clone());
            let y = t.add_row(v, row).unwrap();
            let z = t.mul(y, v).unwrap();
            let s = t.sub(z, v).unwrap();
            let q = t.add(s, y).unwrap();
            reduce(t, q)
        });
        prop_assert!(e < 1e-6, "fd mismatch {}", e);
    }

    #[test]
    fn softmax_rows_are_distributions(x in small_tensor(3, 8)) {
        let mut t = Tape::inference();
        let v = t.leaf(x.map(|v| v * 20.0));
        let s = t.softmax(v, 4).unwrap();
        for r in 0..3 {
            for g in 0..2 {
                let total: f64 = t.value(s).row_slice(r)[g * 4..(g + 1) * 4].iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
