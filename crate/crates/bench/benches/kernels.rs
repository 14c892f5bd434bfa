use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use wsseg::network::NetConfig;
use wsseg::nn::layers::{conv2d_backward, conv2d_forward};
use wsseg::nn::{Mode, Tensor};
use wsseg::training::{self, class_weights, combined_loss, LossConfig, TrainConfig};
use wsseg::weakmodels::{moi1_weights, moi2_weights};
use wsseg_bench::{batch, desk_net, oval_mask, ramp, samples};

fn conv(c: &mut Criterion) {
    let x = ramp(&[4, 16, 32, 32]);
    let w = ramp(&[16, 16, 3, 3]);
    let b = Tensor::zeros(&[16]);
    c.bench_function("conv3x3 16->16 32x32 b4 forward", |bch| {
        bch.iter(|| conv2d_forward(black_box(&x), black_box(&w), &b, 1).unwrap())
    });
    let (y, cache) = conv2d_forward(&x, &w, &b, 1).unwrap();
    c.bench_function("conv3x3 16->16 32x32 b4 backward", |bch| {
        bch.iter(|| conv2d_backward(black_box(&cache), &w, black_box(&y), true).unwrap())
    });
}

fn weights(c: &mut Criterion) {
    let m = oval_mask();
    c.bench_function("moi1 64x64", |b| b.iter(|| moi1_weights(black_box(&m), 1.0).unwrap()));
    c.bench_function("moi2 64x64", |b| b.iter(|| moi2_weights(black_box(&m), 1.0).unwrap()));
}

fn step(c: &mut Criterion) {
    let net = desk_net();
    let p = net.init_params::<f32>(0, 0.995).unwrap();
    let (x, y, phi) = batch(4);
    let cw = class_weights(&y);
    let mut g = c.benchmark_group("desk network");
    g.sample_size(20);
    g.bench_function("forward+loss+backward b4 64x64", |b| {
        b.iter(|| {
            let f = net.forward(p.values(), black_box(&x), Mode::Train, 1).unwrap();
            let l = combined_loss(&f.output, &y, &phi, &cw, &LossConfig::default()).unwrap();
            net.backward(p.values(), &f, &l.grad, false).unwrap()
        })
    });
    let s = samples(8, 64);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    g.sample_size(10);
    g.bench_function("one epoch of 8 samples", |b| {
        b.iter(|| training::train(black_box(&s), &NetConfig::default(), &cfg, |_| {}).unwrap())
    });
    g.finish();
}

criterion_group!(benches, conv, weights, step);
criterion_main!(benches);
