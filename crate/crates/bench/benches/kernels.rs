use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use semidg::autograd::{grad, Var};
use semidg::data::default_domains;
use semidg::metaloop::{meta_step, StepRngs};
use semidg::optim::{Adam, AdamConfig};
use semidg::tensor::ConvGeometry;
use semidg::{Dataset, EpisodeSampler, ImageSize, Model, ModelConfig, Tensor, TrainConfig};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect())
}

fn conv(c: &mut Criterion) {
    let g = ConvGeometry { batch: 4, channels: 16, height: 32, width: 32, kernel: 3, stride: 1, pad: 1 };
    let x = ramp(&g.input_shape());
    let w = ramp(&[16, 16 * 9]);
    let y = Tensor::conv2d(&x, &w, &g);
    c.bench_function("conv2d_forward_4x16x32x32", |b| b.iter(|| Tensor::conv2d(black_box(&x), &w, &g)));
    c.bench_function("conv2d_input_grad_4x16x32x32", |b| b.iter(|| Tensor::conv2d_input_grad(black_box(&y), &w, &g)));
    c.bench_function("conv2d_weight_grad_4x16x32x32", |b| b.iter(|| Tensor::conv2d_weight_grad(black_box(&y), &x, &g)));
    c.bench_function("conv2d_double_backward", |b| {
        b.iter(|| {
            let xv = Var::param(x.clone());
            let wv = Var::param(w.clone());
            let bias = Var::param(Tensor::zeros(&[16]));
            let out = xv.conv2d(&wv, &bias, 3, 1, 1).square().sum();
            let gx = grad(&out, std::slice::from_ref(&xv), true).remove(0);
            grad(&gx.square().sum(), &[wv], false)
        })
    });
}

fn meta(c: &mut Criterion) {
    let size = ImageSize::square(32);
    let dataset = Dataset::generate(default_domains(12, 0.5), size, 0).unwrap();
    let sources = [1, 2, 3];
    let model_cfg = ModelConfig {
        image_size: size,
        num_classes: dataset.num_classes,
        num_domains: sources.len(),
        unet_depth: 2,
        unet_width: 4,
        unet_convs: 1,
        encoder_width: 4,
        decoder_width: 4,
        task_width: 4,
        adain_sites: 1,
        ..ModelConfig::default()
    };
    let model = Model::new(model_cfg.clone()).unwrap();
    let mut sampler = EpisodeSampler::new(&dataset, &sources, 7).unwrap();
    let split = sampler.split().unwrap();
    let (tr, te) = sampler.sample_batches(&split, &dataset, 4).unwrap();
    for (name, second_order) in [("meta_step_second_order_32px", true), ("meta_step_first_order_32px", false)] {
        let config = TrainConfig { second_order, model: model_cfg.clone(), ..TrainConfig::default() };
        let mut values = model.init_params(0);
        let mut adam = Adam::new(AdamConfig::with_lr(config.outer_lr), values.iter());
        let mut rngs = StepRngs::new(0, true);
        c.bench_function(name, |b| {
            b.iter(|| meta_step(&model, &mut values, &mut adam, &tr, &te, &config, &mut rngs).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, meta
}
criterion_main!(benches);
