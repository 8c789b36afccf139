mod common;
mod oracles;

use common::*;
use hiercvae_core::autodiff::{Graph, Var};
use hiercvae_core::config::{LossConfig, ModelConfig, TrainConfig};
use hiercvae_core::cvae::Cvae;
use hiercvae_core::data::{make_windows, SeriesTable, SplitFractions};
use hiercvae_core::gradcheck::grad_check_many;
use hiercvae_core::model::HierCvae;
use hiercvae_core::params::{Bound, ParamStore};
use hiercvae_core::rng;
use hiercvae_core::tensor::Tensor;
use hiercvae_core::train::Trainer;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn cfg(d: usize, m: usize, n_tok: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig { input_dim: d, latent_dim: m, latent_tokens: n_tok, layers, latent_heads: heads, hidden: 8, ..ModelConfig::default() }
}

fn build(c: &ModelConfig, context: usize, seed: u64) -> (ParamStore, Cvae) {
    let mut store = ParamStore::new();
    let cvae = Cvae::new(&mut store, &mut rng(seed), c, context);
    (store, cvae)
}

fn run<T>(store: &ParamStore, f: impl FnOnce(&mut Graph, &Bound) -> T) -> (Graph, T) {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let out = f(&mut g, &p);
    (g, out)
}

#[test]
fn zero_encoder_is_standard_normal() {
    let c = cfg(3, 8, 2, 2, 1);
    let (mut store, cvae) = build(&c, 6, 1);
    zero_matching(&mut store, "cvae.encoder");
    let mut r = rng(2);
    let (x, ctx) = (random_tensor(&mut r, &[1, 3], 2.0), random_tensor(&mut r, &[1, 6], 2.0));
    let (g, (mu, lv)) = run(&store, |g, p| {
        let (x, ctx) = (g.constant(x), g.constant(ctx));
        cvae.encode(g, p, x, ctx).unwrap()
    });
    assert_eq!(value_of(&g, mu), vec![0.0; 8]);
    assert_eq!(value_of(&g, lv), vec![0.0; 8]);
}

#[test]
fn encoder_and_decoder_widths() {
    for (d, m, context) in [(1, 4, 3), (3, 8, 10), (5, 6, 32)] {
        let c = cfg(d, m, 2, 1, 1);
        let (store, cvae) = build(&c, context, 3);
        let mut r = rng(4);
        let (x, ctx, z) = (random_tensor(&mut r, &[1, d], 1.0), random_tensor(&mut r, &[1, context], 1.0), random_tensor(&mut r, &[1, m], 1.0));
        let (g, (e, dec)) = run(&store, |g, p| {
            let (x, ctx, z) = (g.constant(x), g.constant(ctx), g.constant(z));
            (cvae.encode(g, p, x, ctx).unwrap(), cvae.decode(g, p, z, ctx).unwrap())
        });
        assert_eq!((g.shape(e.0), g.shape(e.1)), (&[1, m][..], &[1, m][..]));
        assert_eq!((g.shape(dec.0), g.shape(dec.1)), (&[1, d][..], &[1, d][..]));
    }
}

fn probe(g: &mut Graph, ys: &[Var], seed: u64) -> hiercvae_core::Result<Var> {
    let mut r = rng(seed);
    let mut total: Option<Var> = None;
    for &y in ys {
        let shape = g.shape(y).to_vec();
        let w = g.constant(random_tensor(&mut r, &shape, 1.0));
        let prod = g.mul(y, w)?;
        let s = g.sum(prod)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap())
}

#[test]
fn encoder_gradient_check() {
    let c = cfg(3, 8, 2, 2, 1);
    let (store, cvae) = build(&c, 6, 5);
    let mut r = rng(6);
    let np = store.len();
    let mut points = store.tensors().to_vec();
    points.extend([random_tensor(&mut r, &[1, 3], 1.0), random_tensor(&mut r, &[1, 6], 1.0)]);
    let f = |g: &mut Graph, v: &[Var]| {
        let p = Bound::from_vars(v[..np].to_vec());
        let (mu, lv) = cvae.encode(g, &p, v[np], v[np + 1])?;
        probe(g, &[mu, lv], 7)
    };
    let enc: Vec<usize> = store.ids().filter(|&i| store.name(i).starts_with("cvae.encoder")).map(|i| i.index()).collect();
    let report = grad_check_many(f, &points, 1e-5, |i| i >= np || enc.contains(&i)).unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

fn reparam(cvae: &Cvae, mu: &[f64], lv: &[f64], eps: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let m = g.constant(Tensor::matrix(1, mu.len(), mu.to_vec()).unwrap());
    let l = g.constant(Tensor::matrix(1, lv.len(), lv.to_vec()).unwrap());
    let z = cvae.reparameterize(&mut g, m, l, eps).unwrap();
    value_of(&g, z)
}

#[test]
fn reparameterization_identities() {
    let c = cfg(2, 4, 2, 1, 1);
    let (_, cvae) = build(&c, 3, 8);
    let mu = [0.3, -1.2, 2.5, 0.0];
    assert_eq!(reparam(&cvae, &mu, &[0.7, -2.0, 1.0, 3.0], &[0.0; 4]), mu.to_vec());
    let e = [0.5, -0.25, 1.5, -3.0];
    let expected: Vec<f64> = mu.iter().zip(&e).map(|(m, e)| m + e).collect();
    assert_eq!(reparam(&cvae, &mu, &[0.0; 4], &e), expected);
}

#[test]
fn reparameterization_gradient_skips_noise() {
    let c = cfg(2, 2, 1, 0, 1);
    let (_, cvae) = build(&c, 3, 9);
    let mut g = Graph::new();
    let mu = g.param(Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap());
    let lv = g.param(Tensor::matrix(1, 2, vec![0.4, -0.6]).unwrap());
    let eps = [1.3, -0.7];
    let z = cvae.reparameterize(&mut g, mu, lv, &eps).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(mu).unwrap(), &[1.0, 1.0]);
    let want: Vec<f64> = [0.4f64, -0.6].iter().zip(&eps).map(|(l, e)| 0.5 * (0.5 * l).exp() * e).collect();
    assert_close(g.grad(lv).unwrap(), &want, 1e-15);
}

#[test]
fn monte_carlo_reparameterization_moments() {
    let c = cfg(1, 1, 1, 0, 1);
    let (_, cvae) = build(&c, 1, 10);
    let (mu, sigma) = (1.7f64, 0.6f64);
    let lv = (sigma * sigma).ln();
    let mut r = rng(11);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| reparam(&cvae, &[mu], &[lv], &[StandardNormal.sample(&mut r)])[0]).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((mean - mu).abs() <= 0.02 * mu.abs(), "mean {mean}");
    assert!((sd - sigma).abs() <= 0.02 * sigma, "sd {sd}");
}

fn stack(store: &ParamStore, cvae: &Cvae, z: &Tensor) -> Vec<f64> {
    let (g, out) = run(store, |g, p| {
        let z = g.constant(z.clone());
        cvae.resformer_stack(g, p, z).unwrap()
    });
    value_of(&g, out)
}

#[test]
fn zeroed_blocks_make_resformer_identity() {
    for layers in [1, 2, 5] {
        let c = cfg(2, 8, 2, layers, 1);
        let (mut store, cvae) = build(&c, 3, 12);
        for l in 0..layers {
            zero_matching(&mut store, &format!("cvae.resformer.{l}.msa"));
            zero_matching(&mut store, &format!("cvae.resformer.{l}.mlp"));
        }
        let z = random_tensor(&mut rng(13), &[1, 8], 3.0);
        assert_eq!(stack(&store, &cvae, &z), z.data().to_vec());
    }
}

#[test]
fn no_layers_is_identity() {
    let c = cfg(2, 8, 2, 0, 1);
    let (store, cvae) = build(&c, 3, 14);
    assert!(cvae.layers.is_empty());
    let z = random_tensor(&mut rng(15), &[1, 8], 3.0);
    assert_eq!(stack(&store, &cvae, &z), z.data().to_vec());
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = random_tensor(&mut r, &shape, scale);
    }
}

#[test]
fn single_layer_matches_nested_formula_oracle() {
    for trial in 0..100u64 {
        let (n_tok, heads) = [(2, 1), (4, 1), (2, 2), (3, 2)][trial as usize % 4];
        let d_tok = 4;
        let c = cfg(2, n_tok * d_tok, n_tok, 1, heads);
        let (mut store, cvae) = build(&c, 3, trial);
        randomize(&mut store, 1000 + trial, 0.8);
        let z = random_tensor(&mut rng(2000 + trial), &[1, n_tok * d_tok], 2.0);
        let rows: oracles::resformer::Rows = z.data().chunks(d_tok).map(|c| c.to_vec()).collect();
        let want: Vec<f64> = oracles::resformer::layer(&store, "cvae.resformer.0", &rows, heads).concat();
        assert_close(&stack(&store, &cvae, &z), &want, 1e-10);
    }
}

#[test]
fn zero_decoder_outputs_zero() {
    let c = cfg(3, 8, 2, 2, 1);
    let (mut store, cvae) = build(&c, 6, 16);
    zero_matching(&mut store, "cvae.decoder");
    let mut r = rng(17);
    let (z, ctx) = (random_tensor(&mut r, &[1, 8], 2.0), random_tensor(&mut r, &[1, 6], 2.0));
    let (g, (mu, lv)) = run(&store, |g, p| {
        let (z, ctx) = (g.constant(z), g.constant(ctx));
        cvae.decode(g, p, z, ctx).unwrap()
    });
    assert_eq!(value_of(&g, mu), vec![0.0; 3]);
    assert_eq!(value_of(&g, lv), vec![0.0; 3]);
    let z0 = rng::normals(1, rng::TAG_PRIOR, 0, 0, 8);
    let (g, (mu, _)) = run(&store, |g, p| {
        let ctx = g.constant(random_tensor(&mut rng(18), &[1, 6], 1.0));
        cvae.sample_prior(g, p, ctx, &z0).unwrap()
    });
    assert_eq!(value_of(&g, mu), vec![0.0; 3]);
}

#[test]
fn full_chain_gradient_check() {
    let c = cfg(3, 8, 2, 2, 1);
    let (store, cvae) = build(&c, 6, 19);
    let mut r = rng(20);
    let np = store.len();
    let mut points = store.tensors().to_vec();
    points.extend([random_tensor(&mut r, &[1, 3], 1.0), random_tensor(&mut r, &[1, 6], 1.0)]);
    let eps = rng::normals(3, rng::TAG_TRAIN_EPS, 0, 0, 8);
    let f = |g: &mut Graph, v: &[Var]| {
        let p = Bound::from_vars(v[..np].to_vec());
        let lat = cvae.latent(g, &p, v[np], v[np + 1], &eps)?;
        let (mu, lv) = cvae.decode(g, &p, lat.z_l, v[np + 1])?;
        probe(g, &[mu, lv, lat.mu, lat.log_var], 21)
    };
    let report = grad_check_many(f, &points, 1e-5, |_| true).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

fn small_model() -> ModelConfig {
    ModelConfig {
        input_dim: 1,
        history: 8,
        d_model: 8,
        heads: 2,
        lstm_hidden: 4,
        latent_dim: 4,
        latent_tokens: 2,
        hidden: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn prior_samples_are_repeatable() {
    let model = HierCvae::new(small_model(), LossConfig::default()).unwrap();
    let h = random_tensor(&mut rng(22), &[8, 1], 1.0);
    let a = model.sample(&h, &[0.3], 5, 9).unwrap();
    let b = model.sample(&h, &[0.3], 5, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, model.sample(&h, &[0.3], 5, 10).unwrap());
}

#[test]
fn prior_samples_recover_the_training_mean() {
    let mut r = rng(23);
    let xs: Vec<f64> = (0..600).map(|_| { let e: f64 = StandardNormal.sample(&mut r); 5.0 + e }).collect();
    let table = SeriesTable::indexed(vec![], vec!["x".into()], vec![xs]).unwrap();
    let set = make_windows(&table, 8, SplitFractions::default()).unwrap();
    let model = HierCvae::new(small_model(), LossConfig { warmup_steps: 50, ..LossConfig::default() }).unwrap();
    let mut trainer = Trainer::new(model, TrainConfig { batch: 16, steps: 300, ..TrainConfig::default() }).unwrap();
    for _ in 0..300 {
        trainer.train_step(&set.train).unwrap();
    }
    let windows = &set.test.windows;
    let total: f64 = (0..1000)
        .map(|i| {
            let w = &windows[i % windows.len()];
            let (_, draw) = trainer.model.sample(&w.history, &w.current, 1, i as u64).unwrap();
            set.normalizer.inverse_row(&draw)[0]
        })
        .sum();
    let mean = total / 1000.0;
    assert!((mean - 5.0).abs() <= 0.3, "prior sample mean {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reparameterization_is_bit_exact(mu in prop::collection::vec(-5.0f64..5.0, 4), lv in prop::collection::vec(-10.0f64..10.0, 4), eps in prop::collection::vec(-4.0f64..4.0, 4)) {
        let c = cfg(1, 4, 2, 0, 1);
        let (_, cvae) = build(&c, 1, 0);
        let z = reparam(&cvae, &mu, &lv, &eps);
        for k in 0..4 {
            prop_assert_eq!(z[k], mu[k] + libm::exp(0.5 * lv[k]) * eps[k]);
        }
    }

    #[test]
    fn zeroed_stack_is_identity_for_any_depth(layers in 0usize..4, seed in 0u64..1000) {
        let c = cfg(1, 6, 3, layers, 1);
        let (mut store, cvae) = build(&c, 2, seed);
        randomize(&mut store, seed + 1, 1.0);
        for l in 0..layers {
            zero_matching(&mut store, &format!("cvae.resformer.{l}.msa"));
            zero_matching(&mut store, &format!("cvae.resformer.{l}.mlp"));
        }
        let z = random_tensor(&mut rng(seed + 2), &[1, 6], 4.0);
        prop_assert_eq!(stack(&store, &cvae, &z), z.data().to_vec());
    }
}
