#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidg::data::default_domains;
use semidg::{Dataset, ImageSize, ModelConfig, Tensor, TrainConfig, Var};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Largest elementwise relative error, with `floor` guarding tiny entries.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

/// Checks `d f / d x` from autograd against finite differences.
pub fn check_grad(f: &dyn Fn(&Var) -> Var, x: &Tensor, tol: f64) -> f64 {
    let v = Var::param(x.clone());
    let analytic = semidg::autograd::grad(&f(&v), &[v], false).remove(0).value().clone();
    let numeric = numeric_grad(&|t| f(&Var::constant(t.clone())).item(), x, 1e-5);
    let err = max_rel_err(&analytic, &numeric, 1e-3);
    assert!(err < tol, "relative gradient error {err:.3e} >= {tol:.0e}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    err
}

pub const TINY: usize = 32;

pub fn tiny_model() -> ModelConfig {
    small_model(TINY)
}

pub fn small_model(side: usize) -> ModelConfig {
    ModelConfig {
        image_size: ImageSize::square(side),
        unet_depth: 2,
        unet_width: 4,
        unet_convs: 1,
        encoder_width: 4,
        decoder_width: 4,
        task_width: 4,
        adain_sites: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_dataset(per_domain: usize, labeled: f64) -> Dataset {
    Dataset::generate(default_domains(per_domain, labeled), ImageSize::square(TINY), 0).unwrap()
}

pub fn tiny_train(iterations: usize) -> TrainConfig {
    TrainConfig { iterations, target_domain: Some(0), model: tiny_model(), ..TrainConfig::default() }
}
