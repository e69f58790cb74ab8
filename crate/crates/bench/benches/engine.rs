use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmnet_core::synth::{self, Split};
use mmnet_core::train::sample_gradients;
use mmnet_core::{Graph, MmNet, ModelConfig, SynthConfig, Tensor};
use std::hint::black_box;

fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let (x, y) = (ramp(&[n, n]), ramp(&[n, n]));
            b.iter(|| {
                let mut g = Graph::new();
                let (a, bb) = (g.constant(x.clone()), g.constant(y.clone()));
                black_box(g.matmul(a, bb).unwrap());
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    // The first backbone stage at desk scale: 48×48×16 → 48×48×16, 3×3.
    let (x, k, bias) = (ramp(&[48, 48, 16]), ramp(&[3, 3, 16, 16]), ramp(&[16]));
    c.bench_function("conv2d 48x48x16 k3", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.constant(x.clone()), g.leaf(k.clone()), g.leaf(bias.clone()));
            let y = g.conv2d(xv, kv, bv, 1, 1).unwrap();
            let l = g.sum_all(y).unwrap();
            black_box(g.backward(l).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let net = MmNet::<f32>::new(&cfg, 0).unwrap();
    let s = synth::sample(&SynthConfig::default(), cfg.image_size, cfg.max_len, Split::Train, 0).unwrap();
    let image = s.image::<f32>();
    c.bench_function("predict desk", |b| b.iter(|| black_box(net.predict(&image, &s.tokens).unwrap())));
    c.bench_function("forward+backward desk", |b| b.iter(|| black_box(sample_gradients(&net, &s).unwrap())));
}

fn data(c: &mut Criterion) {
    let cfg = SynthConfig::default();
    c.bench_function("synth sample 96px", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            black_box(synth::sample(&cfg, 96, 8, Split::Train, i).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, conv, model, data
}
criterion_main!(benches);
