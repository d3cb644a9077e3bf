//! One check per acceptance criterion. Each prints a single
//! `PASS`/`FAIL` line with the measured quantity before asserting.
//!
//! Criteria 6 and 7 share one desk-scale leave-one-domain-out suite, run
//! once per process. It takes tens of minutes on a single core.

// The oracles spell out the index loops of their definitions.
#![allow(clippy::needless_range_loop)]

mod common;

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{check_grad, max_rel_err, numeric_grad, random_tensor, tiny_dataset, tiny_train};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semidg::autograd::grad;
use semidg::data::default_domains;
use semidg::experiment::{read_results, run_suite_with, ExperimentConfig, Method, ResultRow, RESULTS_FILE};
use semidg::losses::*;
use semidg::metaloop::*;
use semidg::metrics::*;
use semidg::networks::{adain, channel_moments, standard_normal};
use semidg::{Checkpoint, ImageSize, Tensor, TrainConfig, Var};

fn report(id: u32, ok: bool, what: &str) {
    println!("{} [criterion {id}] {what}", if ok { "PASS" } else { "FAIL" });
}

fn c(shape: &[usize], data: Vec<f64>) -> Var {
    Var::constant(Tensor::new(shape.to_vec(), data))
}

// ---- 1: loss oracles -----------------------------------------------------------------

fn hsic_loop(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[0];
    let gram = |x: &Tensor| {
        let p = x.shape()[1];
        let d = |i: usize, j: usize| (0..p).map(|k| (x.data()[i * p + k] - x.data()[j * p + k]).powi(2)).sum::<f64>().sqrt();
        let mut pairs: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d(i, j)).collect();
        pairs.sort_by(f64::total_cmp);
        let m = pairs.len();
        let sigma = (if m.is_multiple_of(2) { 0.5 * (pairs[m / 2 - 1] + pairs[m / 2]) } else { pairs[m / 2] }).max(1e-3);
        (0..n).map(|i| (0..n).map(|j| (-d(i, j).powi(2) / (2.0 * sigma * sigma)).exp()).collect()).collect::<Vec<Vec<f64>>>()
    };
    let (k, l) = (gram(a), gram(b));
    let h = |i: usize, j: usize| (i == j) as u8 as f64 - 1.0 / n as f64;
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            for p in 0..n {
                for q in 0..n {
                    trace += k[i][j] * h(j, p) * l[p][q] * h(q, i);
                }
            }
        }
    }
    trace / ((n - 1) * (n - 1)) as f64
}

#[test]
fn criterion_1_loss_oracles() {
    let mask: Vec<u8> = vec![0, 1, 2, 3];
    let mut probs = vec![0.0; 16];
    for (i, &k) in mask.iter().enumerate() {
        probs[k as usize * 4 + i] = 1.0;
    }
    let dice = dice_loss(&c(&[1, 4, 2, 2], probs), &[Some(mask)], &[true]).unwrap().item();
    let kl = kl_standard_normal(&c(&[1, 8], vec![1.0; 8]), &c(&[1, 8], vec![0.0; 8])).item();
    let h_const = hsic(&c(&[8, 3], vec![0.4; 24]), &Var::constant(random_tensor(&[8, 3], 1))).unwrap().item();
    let (a, b) = (random_tensor(&[8, 4], 2), random_tensor(&[8, 4], 3));
    let h = hsic(&Var::constant(a.clone()), &Var::constant(b.clone())).unwrap().item();
    let h_err = (h - hsic_loop(&a, &b)).abs();
    let mut za = vec![0.0; 8];
    za[0] = 3.0;
    za[3] = 2.0;
    let mut zb = vec![0.0; 8];
    zb[4] = 1.0;
    let rank = rank_loss(&[c(&[1, 4, 1, 2], za), c(&[1, 4, 1, 2], zb)], 2, None).unwrap().item();

    let ok = dice == 0.0 && (kl - 4.0).abs() < 1e-6 && h_const.abs() < 1e-9 && h_err < 1e-9 && (rank - 1.0).abs() < 1e-5;
    report(
        1,
        ok,
        &format!("dice {dice:.1e}, KL {kl:.9}, HSIC(const) {h_const:.1e}, |HSIC - loop oracle| {h_err:.1e}, rank {rank:.9}"),
    );
    assert!(ok);
}

// ---- 2: gradient suite -----------------------------------------------------------------

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let masks = vec![Some(vec![0u8, 1, 2, 3]), None, Some(vec![3u8, 2, 2, 1])];
    let labeled = [true, false, true];
    let lv = random_tensor(&[3, 8], 8);
    let mu = random_tensor(&[3, 8], 9);
    let hb = random_tensor(&[6, 4], 11);
    let target = random_tensor(&[2, 1, 3, 3], 12);
    let onehot = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let mut errs = vec![
        ("dice", check_grad(&|x| dice_loss(&x.softmax(1), &masks, &labeled).unwrap(), &random_tensor(&[3, 4, 2, 2], 5), 1e-4)),
        ("kl/mu", check_grad(&|x| kl_standard_normal(x, &Var::constant(lv.clone())), &mu, 1e-4)),
        ("kl/logvar", check_grad(&|x| kl_standard_normal(&Var::constant(mu.clone()), x), &lv, 1e-4)),
        ("hsic", check_grad(&|x| hsic(x, &Var::constant(hb.clone())).unwrap(), &random_tensor(&[6, 4], 10), 1e-4)),
        ("rec", check_grad(&|x| l1_reconstruction(&Var::constant(target.clone()), x), &random_tensor(&[2, 1, 3, 3], 13), 1e-4)),
        ("cls", check_grad(&|x| classification_loss(x, &Var::constant(onehot.clone())), &random_tensor(&[3, 3], 14), 1e-4)),
    ];
    let mut z = random_tensor(&[1, 5, 2, 3], 15);
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v *= 1.0 + 2.0 * (i / 6) as f64;
    }
    let other = random_tensor(&[2, 5, 2, 3], 16);
    let rank_err = check_grad(&|x| rank_loss(&[x.clone(), Var::constant(other.clone())], 2, None).unwrap(), &z, 1e-3);

    // Toy quadratic bilevel objective L_tr(w) + L_te(w - α∇L_tr(w)).
    let quad = |w: &Var, a: [f64; 3], b: [f64; 3]| {
        w.square().mul(&c(&[3], a.to_vec())).scale(0.5).add(&w.mul(&c(&[3], b.to_vec()))).sum()
    };
    let objective = |w: &Var| {
        bilevel_objective(
            std::slice::from_ref(w),
            |p| quad(&p[0], [1.0, 2.0, 0.5], [0.3, -0.2, 0.1]),
            |p| quad(&p[0], [0.7, 1.5, 2.5], [-0.4, 0.6, 0.2]),
            0.3,
            true,
        )
        .unwrap()
    };
    let w0 = random_tensor(&[3], 2);
    let w = Var::param(w0.clone());
    let analytic = grad(&objective(&w), &[w], false).remove(0).value().clone();
    let numeric = numeric_grad(&|t| objective(&Var::param(t.clone())).item(), &w0, 1e-5);
    errs.push(("bilevel", max_rel_err(&analytic, &numeric, 1e-3)));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let ok = worst < 1e-4 && rank_err < 1e-3;
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(2, ok, &format!("max rel err {worst:.1e} (< 1e-4) [{}], rank {rank_err:.1e} (< 1e-3)", detail.join(", ")));
    assert!(ok);
}

// ---- 3: AdaIN ------------------------------------------------------------------------------

#[test]
fn criterion_3_adain_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_style = 0.0f64;
    for seed in 0..20 {
        let x = random_tensor(&[2, 4, 8, 8], seed);
        let mu = standard_normal(&[2, 4], &mut rng).map(|v| 2.0 * v);
        let sigma = standard_normal(&[2, 4], &mut rng).map(|v| 0.2 + v.abs() * 2.0);
        let y = adain(&Var::constant(x), &Var::constant(mu.clone()), &Var::constant(sigma.clone()));
        let (m, s) = channel_moments(y.value());
        worst_style = worst_style.max(m.max_abs_diff(&mu)).max(s.max_abs_diff(&sigma));
    }
    let x = random_tensor(&[2, 4, 8, 8], 99);
    let (m, s) = channel_moments(&x);
    let identity = adain(&Var::constant(x.clone()), &Var::constant(m), &Var::constant(s)).value().max_abs_diff(&x);
    let ok = worst_style < 1e-4 && identity < 1e-5;
    report(3, ok, &format!("style moment error {worst_style:.1e} (< 1e-4), identity restyle error {identity:.1e} (< 1e-5)"));
    assert!(ok);
}

// ---- 4: inner/outer mechanics ----------------------------------------------------------------

#[test]
fn criterion_4_bilevel_mechanics() {
    let w = Var::param(random_tensor(&[5], 1));
    let id = sgd_step(std::slice::from_ref(&w), &w.square().sum(), 0.0, true).unwrap()[0].value().max_abs_diff(w.value());

    let meta = |train: &dyn Fn(&[Var]) -> Var, second_order: bool| {
        let w = Var::param(Tensor::new(vec![3], vec![0.5, -1.0, 1.5]));
        let te = |p: &[Var]| p[0].add_scalar(-1.0).square().sum();
        let obj = bilevel_objective(std::slice::from_ref(&w), train, te, 0.1, second_order).unwrap();
        grad(&obj, &[w], false).remove(0).value().clone()
    };
    let curved = |p: &[Var]| p[0].square().square().sum();
    let curved_gap = meta(&curved, true).max_abs_diff(&meta(&curved, false));
    let k = Tensor::new(vec![3], vec![0.2, -0.7, 1.1]);
    let linear = move |p: &[Var]| p[0].mul(&Var::constant(k.clone())).sum();
    let flat_gap = meta(&linear, true).max_abs_diff(&meta(&linear, false));

    let ok = id == 0.0 && curved_gap > 1e-3 && flat_gap < 1e-12;
    report(
        4,
        ok,
        &format!("alpha=0 step change {id:.1e}; 2nd-vs-1st order gap: curved {curved_gap:.3e}, zero Hessian {flat_gap:.1e}"),
    );
    assert!(ok);
}

// ---- 5: masks of unlabeled samples are never read ---------------------------------------------

#[test]
fn criterion_5_unlabeled_masks_are_never_read() {
    let poisoned = |sentinel: u8| {
        let mut ds = tiny_dataset(8, 0.25);
        for s in ds.samples.iter_mut().filter(|s| !s.labeled) {
            s.mask = Some(vec![sentinel; s.size.pixels()]);
        }
        ds
    };
    let (a, b) = (poisoned(0), poisoned(255));
    let cfg = TrainConfig { outer_lr: 1e-3, inner_lr: 1e-3, ..tiny_train(50) };
    let meta_a = train(&cfg, &a).unwrap();
    let meta_b = train(&cfg, &b).unwrap();
    let erm_a = train_erm_baseline(&cfg, &a).unwrap();
    let erm_b = train_erm_baseline(&cfg, &b).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let same_meta = bits(meta_a.history.loss_trace()) == bits(meta_b.history.loss_trace())
        && meta_a.checkpoint == meta_b.checkpoint;
    let same_erm = bits(erm_a.history.loss_trace()) == bits(erm_b.history.loss_trace())
        && erm_a.checkpoint == erm_b.checkpoint;
    let ok = same_meta && same_erm && meta_a.history.steps.len() == 50;
    report(5, ok, &format!("50-step loss traces bitwise equal under sentinels 0/255: meta {same_meta}, baseline {same_erm}"));
    assert!(ok);
}

// ---- 6 and 7: desk-scale suite ------------------------------------------------------------

/// The desk-scale protocol from `configs/desk.toml`: 4 synthetic domains,
/// leave-one-out, 10% labels, 2,000 iterations, seeds {0, 1, 2}.
fn desk_config(methods: Vec<Method>) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let config = ExperimentConfig::load(&path).unwrap();
    assert_eq!((config.domains.len(), config.label_fractions.as_slice(), config.train.iterations), (4, &[0.1][..], 2_000));
    assert_eq!(config.seeds, [0, 1, 2]);
    ExperimentConfig { methods, ..config }
}

struct Suite {
    rows: Vec<ResultRow>,
    /// Wall time of the full-method and baseline runs.
    primary: Duration,
    /// Wall time of the three single-loss ablations.
    ablations: Duration,
    failures: Vec<String>,
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let log = |key: &semidg::experiment::RunKey, r: &Result<ResultRow, String>| match r {
            Ok(row) => eprintln!("  {} dice {:.2} dc {:.4}", row.run_id, row.mean_dice, row.dc),
            Err(e) => eprintln!("  {} failed: {e}", key.run_id()),
        };
        let t = Instant::now();
        let a = run_suite_with(&desk_config(vec![Method::Full, Method::Erm]), dir.path(), log).unwrap();
        let primary = t.elapsed();
        let t = Instant::now();
        let all = vec![Method::Full, Method::NoRank, Method::NoCls, Method::NoHsic, Method::Erm];
        let b = run_suite_with(&desk_config(all), dir.path(), log).unwrap();
        let ablations = t.elapsed();
        let failures = a.failed.iter().chain(&b.failed).map(|(id, e)| format!("{id}: {e}")).collect();
        Suite { rows: read_results(&dir.path().join(RESULTS_FILE)).unwrap(), primary, ablations, failures }
    })
}

/// Mean over targets of the per-target mean over seeds.
fn mean_of(rows: &[ResultRow], method: Method, f: fn(&ResultRow) -> f64) -> f64 {
    let targets: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.target_domain).collect();
    let per_target: Vec<f64> = targets
        .iter()
        .map(|&t| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.target_domain == t).map(f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    per_target.iter().sum::<f64>() / per_target.len() as f64
}

#[test]
fn criterion_6_meta_learning_beats_the_baseline() {
    let s = suite();
    let full = mean_of(&s.rows, Method::Full, |r| r.mean_dice);
    let erm = mean_of(&s.rows, Method::Erm, |r| r.mean_dice);
    let minutes = s.primary.as_secs_f64() / 60.0;
    let ok = s.failures.is_empty() && full >= erm && full - erm > 0.0 && minutes <= 30.0;
    report(
        6,
        ok,
        &format!(
            "held-out Dice full {full:.2} vs baseline {erm:.2} (improvement {:+.2}); runtime {minutes:.1} min (<= 30); failed runs {}",
            full - erm,
            s.failures.len()
        ),
    );
    assert!(ok, "{:?}", s.failures);
}

#[test]
fn criterion_7_ablation_directions() {
    let s = suite();
    let dc_full = mean_of(&s.rows, Method::Full, |r| r.dc);
    let dc_no_rank = mean_of(&s.rows, Method::NoRank, |r| r.dc);
    let dice = |m| mean_of(&s.rows, m, |r| r.mean_dice);
    let full = dice(Method::Full);
    let ablated = [Method::NoRank, Method::NoCls, Method::NoHsic].map(|m| (m, dice(m)));
    let ok = s.failures.is_empty() && dc_full < dc_no_rank && ablated.iter().all(|&(_, d)| full >= d);
    let detail: Vec<String> = ablated.iter().map(|(m, d)| format!("{m} {d:.2}")).collect();
    report(
        7,
        ok,
        &format!(
            "DC full {dc_full:.4} vs no_rank {dc_no_rank:.4}; Dice full {full:.2} vs {}; ablation runtime {:.1} min",
            detail.join(", "),
            s.ablations.as_secs_f64() / 60.0
        ),
    );
    assert!(ok, "{:?}", s.failures);
}

// ---- 8: metric oracles ----------------------------------------------------------------------

#[test]
fn criterion_8_metric_oracles() {
    let dice = dice_score(&[1, 1, 0, 0], &[1, 1, 1, 1], 1);
    let mhd = hausdorff(&[1, 1], &[1, 0], ImageSize { height: 2, width: 1 }, 1, HausdorffVariant::Modified).distance;
    let a = random_tensor(&[50, 3], 5);
    let self_dc = distance_correlation(&a, &a).unwrap().value;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let indep = distance_correlation(&standard_normal(&[2000, 2], &mut rng), &standard_normal(&[2000, 2], &mut rng)).unwrap().value;
    let ok = (dice - 66.67).abs() < 0.01 && (mhd - 0.5).abs() < 1e-9 && (self_dc - 1.0).abs() < 1e-9 && indep < 0.1;
    report(8, ok, &format!("Dice {dice:.4}, MHD {mhd}, DC(A,A) {self_dc:.12}, DC(indep, n=2000) {indep:.4}"));
    assert!(ok);
}

// ---- 9: reproducibility ---------------------------------------------------------------------

#[test]
fn criterion_9_reproducibility() {
    let ds = tiny_dataset(6, 0.5);
    let cfg = TrainConfig { outer_lr: 1e-3, inner_lr: 1e-3, ..tiny_train(20) };
    let (a, b) = (train(&cfg, &ds).unwrap(), train(&cfg, &ds).unwrap());
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let traces = bits(a.history.loss_trace()) == bits(b.history.loss_trace());

    let exp = ExperimentConfig {
        image_size: common::TINY,
        domains: default_domains(4, 0.5),
        label_fractions: vec![0.5],
        methods: vec![Method::Full, Method::Erm],
        seeds: vec![0],
        targets: vec![1],
        workers: 1,
        save_checkpoints: false,
        train: TrainConfig { iterations: 3, ..cfg.clone() },
        ..ExperimentConfig::default()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_suite_with(&exp, d1.path(), |_, _| {}).unwrap();
    run_suite_with(&exp, d2.path(), |_, _| {}).unwrap();
    let csv = |d: &tempfile::TempDir| std::fs::read(d.path().join(RESULTS_FILE)).unwrap();
    let rows = csv(&d1) == csv(&d2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let images = semidg::Batch::from_indices(&ds, &[0, 7, 13, 20], &[0, 1, 2, 3]).unwrap().images;
    let outputs = |c: &Checkpoint| {
        let m = c.build_model().unwrap();
        let o = eval_outputs(&m, &c.params(&m).unwrap(), &images).unwrap();
        [o.y_hat, o.x_hat, o.z, o.s, o.d].map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    let ckpt = outputs(&a.checkpoint) == outputs(&loaded);

    let ok = traces && rows && ckpt;
    report(9, ok, &format!("loss trace bitwise {traces}, results CSV identical {rows}, checkpoint eval outputs bitwise {ckpt}"));
    assert!(ok);
}
