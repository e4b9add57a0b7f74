use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use zsda_bench::{denoiser_fixture, noisy_input, scenes};
use zsda_core::diffusion::NoisePredictor;
use zsda_core::nn::{Conv2d, ParamAllocator};
use zsda_core::rng::rng_from_seed;
use zsda_core::scene::Domain;
use zsda_core::segmentation::{miou, SegConfig, SegModel};

fn conv(c: &mut Criterion) {
    let mut alloc = ParamAllocator::default();
    let layer = Conv2d::new(&mut alloc, 19, 16, 3, 1, true);
    let mut params = vec![0.0; alloc.len()];
    layer.init(&mut params, &mut rng_from_seed(0), 1.0);
    let x = zsda_core::tensor::Tensor3::filled(19, 32, 64, 0.5);
    c.bench_function("conv3x3_19to16_32x64", |b| b.iter(|| layer.apply(&params, black_box(&x))));
}

fn denoiser(c: &mut Criterion) {
    let (den, cond) = denoiser_fixture();
    let z = noisy_input(3);
    c.bench_function("predict_noise", |b| {
        b.iter(|| den.predict_noise(black_box(&z), 25, &cond).unwrap())
    });
}

fn segmenter(c: &mut Criterion) {
    let m = SegModel::new(SegConfig::default(), 0).unwrap();
    let s = &scenes(1, Domain::Night)[0];
    c.bench_function("segmenter_logits", |b| b.iter(|| m.logits(black_box(&s.image)).unwrap()));
    c.bench_function("segmenter_forward_backward", |b| {
        let mut grads = vec![0.0; m.num_params()];
        b.iter(|| {
            let f = m.forward_train(black_box(&s.image)).unwrap();
            m.backward(&f.tape, Some(&f.logits), Some(&f.pooled), &mut grads);
        })
    });
}

fn metric(c: &mut Criterion) {
    let samples = scenes(64, Domain::Fog);
    let gts: Vec<_> = samples.iter().map(|s| s.layout.clone()).collect();
    let preds: Vec<_> = gts.iter().rev().cloned().collect();
    c.bench_function("miou_64_maps", |b| b.iter(|| miou(black_box(&preds), &gts, 5).unwrap()));
}

criterion_group!(benches, conv, denoiser, segmenter, metric);
criterion_main!(benches);
