use hiercvae_core::autodiff::{Graph, Var};
use hiercvae_core::gradcheck::grad_check;
use hiercvae_core::tensor::Tensor;
use hiercvae_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_primitive(name: &str, shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..10 {
        let x = random_tensor(&mut rng, shape, lo, hi);
        let err = grad_check(|g, v| { let y = f(g, v)?; probe(g, y, trial) }, &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{name}: trial {trial} rel error {err}");
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_hand_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias, 1).unwrap();
    let sigma = (2.0f64 / 3.0 + 1e-5).sqrt();
    let expect = [-1.0 / sigma, 0.0, 1.0 / sigma];
    for (v, e) in g.value(y).data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-12);
    }
    assert!((g.value(y).data()[2] - 1.2247).abs() < 1e-4);
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
    let k = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(x, k, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 4.0]);
}

#[test]
fn conv1d_same_padding_width_three() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
    let k = g.constant(Tensor::matrix(1, 3, vec![1.0, 10.0, 100.0]).unwrap());
    let b = g.constant(Tensor::full(&[1], 0.5));
    let y = g.conv1d(x, k, b).unwrap();
    // out[t] = b + k0 x[t-1] + k1 x[t] + k2 x[t+1]
    assert_eq!(g.value(y).data(), &[0.5 + 10.0 + 200.0, 0.5 + 1.0 + 20.0 + 400.0, 0.5 + 2.0 + 40.0]);
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let x0 = random_tensor(&mut rng, &[4, 1], -1.0, 1.0);
    let f = |xs: &Tensor| -> (Graph, Var, Var) {
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let xv = g.param(xs.clone());
        let y = g.matmul(av, xv).unwrap();
        let l = g.sum(y).unwrap();
        (g, xv, l)
    };
    let (mut g, xv, l) = f(&x0);
    g.backward(l).unwrap();
    let grad = g.grad(xv).unwrap().to_vec();
    for j in 0..4 {
        let mut up = x0.clone();
        up.data_mut()[j] += 1e-5;
        let mut dn = x0.clone();
        dn.data_mut()[j] -= 1e-5;
        let (gu, _, lu) = f(&up);
        let (gd, _, ld) = f(&dn);
        let fd = (gu.item(lu) - gd.item(ld)) / 2e-5;
        let col_sum: f64 = (0..3).map(|i| a.at(i, j)).sum();
        assert!((fd - col_sum).abs() < 1e-8);
        assert!((grad[j] - col_sum).abs() < 1e-12);
    }
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn gradients_accumulate_over_consumers() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let a = g.sum(x).unwrap();
    let b = g.sum(x).unwrap();
    let l = g.add(a, b).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::Contract(_))));
    g.reset_grads();
    g.backward(l).unwrap();
}

#[test]
fn primitive_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    let neg = g.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(g.log(neg), Err(Error::Domain { .. })));
    assert!(matches!(g.sqrt(neg), Err(Error::Domain { .. })));
    let zero = g.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(g.log(zero), Err(Error::Numeric(_))));
    let one = g.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(g.div(one, zero), Err(Error::Numeric(_))));
    assert!(matches!(g.softmax(a, 2), Err(Error::Dimension { .. })));
    let big = g.constant(Tensor::vector(vec![1000.0]));
    assert!(matches!(g.exp(big), Err(Error::Numeric(_))));
}

#[test]
fn grad_check_constant_function_is_zero() {
    let x = Tensor::vector(vec![0.5, 1.5]);
    let err = grad_check(|g, _| Ok(g.scalar(4.0)), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_square_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[5], -3.0, 3.0);
    let err = grad_check(|g, v| { let s = g.mul(v, v)?; g.sum(s) }, &x, 1e-5).unwrap();
    assert!(err <= 1e-6);
}

#[test]
fn every_primitive_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let row = random_tensor(&mut rng, &[4], -1.0, 1.0);
    let other = random_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let gain = random_tensor(&mut rng, &[4], 0.5, 1.5);
    let bias = random_tensor(&mut rng, &[4], -0.5, 0.5);
    let kernel = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let cb = random_tensor(&mut rng, &[4], -1.0, 1.0);
    let shape = [3, 4];

    check_primitive("matmul-lhs", &shape, -1.0, 1.0, |g, x| { let c = g.constant(w.clone()); g.matmul(x, c) });
    check_primitive("matmul-rhs", &[4, 3], -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.matmul(c, x) });
    check_primitive("add", &shape, -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.add(x, c) });
    check_primitive("add-row", &shape, -1.0, 1.0, |g, x| { let c = g.constant(row.clone()); g.add(x, c) });
    check_primitive("add-row-rhs", &[4], -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.add(c, x) });
    check_primitive("sub", &shape, -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.sub(c, x) });
    check_primitive("mul", &shape, -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.mul(x, c) });
    check_primitive("mul-scalar", &[1], -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.mul(c, x) });
    check_primitive("div-num", &shape, -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.div(x, c) });
    check_primitive("div-den", &shape, 0.5, 2.0, |g, x| { let c = g.constant(other.clone()); g.div(c, x) });
    check_primitive("exp", &shape, -2.0, 2.0, |g, x| g.exp(x));
    check_primitive("log", &shape, 0.3, 3.0, |g, x| g.log(x));
    check_primitive("sqrt", &shape, 0.3, 3.0, |g, x| g.sqrt(x));
    check_primitive("tanh", &shape, -2.0, 2.0, |g, x| g.tanh(x));
    check_primitive("sigmoid", &shape, -4.0, 4.0, |g, x| g.sigmoid(x));
    check_primitive("softplus", &shape, -4.0, 4.0, |g, x| g.softplus(x));
    check_primitive("relu", &shape, 0.1, 2.0, |g, x| g.relu(x));
    check_primitive("neg", &shape, -1.0, 1.0, |g, x| g.neg(x));
    check_primitive("powf", &shape, 0.3, 2.0, |g, x| g.powf(x, 2.5));
    check_primitive("affine", &shape, -1.0, 1.0, |g, x| g.affine_const(x, -1.5, 0.25));
    check_primitive("clamp", &shape, -0.9, 0.9, |g, x| g.clamp(x, -1.0, 1.0));
    check_primitive("sum", &shape, -1.0, 1.0, |g, x| g.sum(x));
    check_primitive("mean", &shape, -1.0, 1.0, |g, x| g.mean(x));
    check_primitive("sum_axis0", &shape, -1.0, 1.0, |g, x| g.sum_axis(x, 0));
    check_primitive("mean_axis1", &shape, -1.0, 1.0, |g, x| g.mean_axis(x, 1));
    check_primitive("concat0", &shape, -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.concat(&[c, x, x], 0) });
    check_primitive("concat1", &shape, -1.0, 1.0, |g, x| { let c = g.constant(other.clone()); g.concat(&[x, c], 1) });
    check_primitive("slice", &shape, -1.0, 1.0, |g, x| g.slice(x, 1, 1, 2));
    check_primitive("reshape", &shape, -1.0, 1.0, |g, x| g.reshape(x, &[2, 6]));
    check_primitive("transpose", &shape, -1.0, 1.0, |g, x| g.transpose(x));
    check_primitive("softmax0", &shape, -2.0, 2.0, |g, x| g.softmax(x, 0));
    check_primitive("softmax1", &shape, -2.0, 2.0, |g, x| g.softmax(x, 1));
    check_primitive("layer_norm-x", &shape, -2.0, 2.0, |g, x| {
        let (a, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
        g.layer_norm(x, a, b, 1)
    });
    check_primitive("layer_norm-gain", &[4], 0.5, 1.5, |g, gn| {
        let x = g.constant(other.clone());
        let b = g.constant(bias.clone());
        g.layer_norm(x, gn, b, 1)
    });
    check_primitive("layer_norm-bias", &[4], -1.0, 1.0, |g, bs| {
        let x = g.constant(other.clone());
        let a = g.constant(gain.clone());
        g.layer_norm(x, a, bs, 1)
    });
    check_primitive("conv1d-x", &[5, 4], -1.0, 1.0, |g, x| {
        let (k, b) = (g.constant(kernel.clone()), g.constant(cb.clone()));
        g.conv1d(x, k, b)
    });
    check_primitive("conv1d-kernel", &[4, 3], -1.0, 1.0, |g, k| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = g.constant(random_tensor(&mut r, &[5, 4], -1.0, 1.0));
        let b = g.constant(cb.clone());
        g.conv1d(x, k, b)
    });
    check_primitive("conv1d-bias", &[4], -1.0, 1.0, |g, b| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = g.constant(random_tensor(&mut r, &[5, 4], -1.0, 1.0));
        let k = g.constant(kernel.clone());
        g.conv1d(x, k, b)
    });
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_ignores_row_shift(vals in proptest::collection::vec(-5.0f64..5.0, 6), c in -50.0f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vals.clone()).unwrap());
        let xs = g.add_scalar(x, c).unwrap();
        let a = g.softmax(x, 1).unwrap();
        let b = g.softmax(xs, 1).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes(vals in proptest::collection::vec(-10.0f64..10.0, 8)) {
        // eps = 1e-5 sits inside the square root, so the unit-variance bound
        // of 1e-6 only holds once the input variance is at least 10.
        let m = vals.iter().sum::<f64>() / 8.0;
        prop_assume!(vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0 >= 10.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 8, vals).unwrap());
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias, 1).unwrap();
        let out = g.value(y).data();
        let mu = out.iter().sum::<f64>() / 8.0;
        let var = out.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mu.abs() <= 1e-9);
        prop_assert!((var - 1.0).abs() <= 1e-6, "variance {}", var);
    }
}
