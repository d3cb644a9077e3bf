// Oracles spell out the index loops of their definitions.
#![allow(clippy::needless_range_loop)]

mod common;

use common::{check_grad, random_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semidg::losses::*;
use semidg::networks::{adain, channel_moments, reparameterize, standard_normal};
use semidg::{Tensor, Var};

fn c(shape: &[usize], data: Vec<f64>) -> Var {
    Var::constant(Tensor::new(shape.to_vec(), data))
}

/// HSIC by explicit loops: RBF Gram matrices with median-distance bandwidth,
/// centring matrix H = I - 11ᵀ/n, trace(K H L H) / (n-1)².
fn hsic_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[0];
    let gram = |x: &Tensor| {
        let p = x.shape()[1];
        let dist = |i: usize, j: usize| {
            (0..p).map(|k| (x.data()[i * p + k] - x.data()[j * p + k]).powi(2)).sum::<f64>().sqrt()
        };
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(dist(i, j));
            }
        }
        pairs.sort_by(f64::total_cmp);
        let m = pairs.len();
        let median = if m % 2 == 0 { 0.5 * (pairs[m / 2 - 1] + pairs[m / 2]) } else { pairs[m / 2] };
        let sigma = median.max(1e-3);
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = (-dist(i, j).powi(2) / (2.0 * sigma * sigma)).exp();
            }
        }
        k
    };
    let (k, l) = (gram(a), gram(b));
    let h = |i: usize, j: usize| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
    let mul = |x: &Vec<Vec<f64>>, y: &dyn Fn(usize, usize) -> f64| {
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|t| x[i][t] * y(t, j)).sum()).collect()).collect::<Vec<Vec<f64>>>()
    };
    let kh = mul(&k, &h);
    let khl = mul(&kh, &|i, j| l[i][j]);
    let khlh = mul(&khl, &h);
    (0..n).map(|i| khlh[i][i]).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

/// Two domains whose stacked `[4, 4]` feature matrix is diag(3, 2, 1, 0).
fn constructed_spectrum() -> Vec<Var> {
    let mut a = vec![0.0; 8];
    a[0] = 3.0; // channel 0, column 0
    a[2 + 1] = 2.0; // channel 1, column 1
    let mut b = vec![0.0; 8];
    b[2 * 2] = 1.0; // channel 2, column 2
    vec![c(&[1, 4, 1, 2], a), c(&[1, 4, 1, 2], b)]
}

#[test]
fn soft_dice_of_perfect_one_hot_is_zero() {
    let mask: Vec<u8> = vec![0, 1, 2, 3, 3, 2, 1, 0, 1];
    let mut probs = vec![0.0; 4 * 9];
    for (i, &k) in mask.iter().enumerate() {
        probs[k as usize * 9 + i] = 1.0;
    }
    let loss = dice_loss(&c(&[1, 4, 3, 3], probs), &[Some(mask)], &[true]).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn kl_of_unit_mean_eight_dims_is_four() {
    let kl = kl_standard_normal(&c(&[1, 8], vec![1.0; 8]), &c(&[1, 8], vec![0.0; 8]));
    assert!((kl.item() - 4.0).abs() < 1e-6);
}

#[test]
fn hsic_of_constant_batch_is_zero() {
    let a = c(&[8, 3], vec![0.7; 24]);
    let b = Var::constant(random_tensor(&[8, 5], 1));
    assert!(hsic(&a, &b).unwrap().item().abs() < 1e-9);
}

#[test]
fn hsic_matches_explicit_loop_oracle() {
    for seed in 0..5 {
        let a = random_tensor(&[8, 8], seed);
        let b = random_tensor(&[8, 8], seed + 100);
        let got = hsic(&Var::constant(a.clone()), &Var::constant(b.clone())).unwrap().item();
        let want = hsic_oracle(&a, &b);
        assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn rank_loss_of_constructed_spectrum_is_third_singular_value() {
    let r = rank_loss(&constructed_spectrum(), 2, None).unwrap();
    assert!((r.item() - 1.0).abs() < 1e-5);
}

#[test]
fn rank_loss_jitter_is_negligible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = rank_loss(&constructed_spectrum(), 2, Some(&mut rng)).unwrap();
    assert!((r.item() - 1.0).abs() < 1e-5);
}

// ---- gradients -----------------------------------------------------------------

#[test]
fn dice_gradient() {
    let mask = vec![Some(vec![0u8, 1, 2, 1]), None, Some(vec![2u8, 2, 0, 1])];
    let labeled = [true, false, true];
    let logits = random_tensor(&[3, 3, 2, 2], 5);
    check_grad(&|x| dice_loss(&x.softmax(1), &mask, &labeled).unwrap(), &logits, 1e-4);
}

#[test]
fn kl_gradient() {
    let lv = random_tensor(&[3, 8], 8);
    check_grad(&|x| kl_standard_normal(x, &Var::constant(lv.clone())), &random_tensor(&[3, 8], 7), 1e-4);
    let mu = random_tensor(&[3, 8], 9);
    check_grad(&|x| kl_standard_normal(&Var::constant(mu.clone()), x), &lv, 1e-4);
}

#[test]
fn hsic_gradient() {
    let b = random_tensor(&[6, 4], 11);
    check_grad(&|x| hsic(x, &Var::constant(b.clone())).unwrap(), &random_tensor(&[6, 4], 10), 1e-4);
}

#[test]
fn reconstruction_gradient() {
    let target = random_tensor(&[2, 1, 3, 3], 12);
    check_grad(&|x| l1_reconstruction(&Var::constant(target.clone()), x), &random_tensor(&[2, 1, 3, 3], 13), 1e-4);
}

#[test]
fn classification_gradient() {
    let onehot = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    check_grad(&|x| classification_loss(x, &Var::constant(onehot.clone())), &random_tensor(&[3, 3], 14), 1e-4);
}

#[test]
fn rank_gradient_with_separated_singular_values() {
    // Scaled rows keep the spectrum well separated.
    let mut z = random_tensor(&[1, 5, 2, 3], 15);
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v *= 1.0 + 2.0 * (i / 6) as f64;
    }
    let other = random_tensor(&[2, 5, 2, 3], 16);
    check_grad(&|x| rank_loss(&[x.clone(), Var::constant(other.clone())], 2, None).unwrap(), &z, 1e-3);
}

// ---- AdaIN and sampling -------------------------------------------------------------

#[test]
fn identity_restyling_reproduces_input() {
    let x = random_tensor(&[2, 3, 5, 5], 20);
    let (mean, std) = channel_moments(&x);
    let y = adain(&Var::constant(x.clone()), &Var::constant(mean), &Var::constant(std));
    assert!(y.value().max_abs_diff(&x) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adain_output_has_the_style_moments(
        seed in 0u64..1000,
        mu in prop::collection::vec(-3.0f64..3.0, 6),
        sigma in prop::collection::vec(0.1f64..4.0, 6),
    ) {
        let x = random_tensor(&[2, 3, 6, 6], seed);
        let y = adain(
            &Var::constant(x),
            &Var::constant(Tensor::new(vec![2, 3], mu.clone())),
            &Var::constant(Tensor::new(vec![2, 3], sigma.clone())),
        );
        let (m, s) = channel_moments(y.value());
        for i in 0..6 {
            prop_assert!((m.data()[i] - mu[i]).abs() < 1e-4);
            prop_assert!((s.data()[i] - sigma[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn hsic_is_nonnegative_and_symmetric(seed in 0u64..1000) {
        let a = Var::constant(random_tensor(&[6, 3], seed));
        let b = Var::constant(random_tensor(&[6, 2], seed + 7));
        let ab = hsic(&a, &b).unwrap().item();
        let ba = hsic(&b, &a).unwrap().item();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 8), lv in prop::collection::vec(-5.0f64..5.0, 8)) {
        let kl = kl_standard_normal(&c(&[1, 8], mu), &c(&[1, 8], lv)).item();
        prop_assert!(kl >= 0.0);
    }
}

#[test]
fn reparameterized_samples_have_the_requested_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 20_000;
    let mu = c(&[n, 1], vec![1.5; n]);
    let logvar = c(&[n, 1], vec![(0.25f64).ln(); n]);
    let eps = standard_normal(&[n, 1], &mut rng);
    let s = reparameterize(&mu, &logvar, &eps);
    let data = s.value().data();
    let mean = data.iter().sum::<f64>() / n as f64;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - 1.5).abs() < 0.02, "mean {mean}");
    assert!((var - 0.25).abs() < 0.02, "var {var}");
}
