use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use depthdecode_bench::{batch, scenes, weights};
use depthdecode_core::encdec::{Decoder, DecoderConfig, Encoder, EncoderConfig};
use depthdecode_core::evaluation::rank_identify;
use depthdecode_core::nn::kernels::{conv3x3_backward, conv3x3_forward};
use depthdecode_core::perceptual::{
    normalized_batch, perceptual_loss_batch, ExtractorConfig, FeatureExtractor, PerceptualConfig,
};
use depthdecode_core::types::{stack_samples, ChannelMode, FmriVector};
use ndarray::{Array1, Array2};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3");
    for &(cin, cout, side) in &[(4usize, 16usize, 32usize), (16, 32, 16), (64, 128, 4)] {
        let x = batch((8, cin, side, side));
        let w = weights(cout, cin * 9);
        let b = Array1::<f64>::zeros(cout);
        let id = format!("{cin}x{cout}@{side}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |bench, x| {
            bench.iter(|| conv3x3_forward(black_box(x), w.view(), Some(b.view())))
        });
        let dy = batch((8, cout, side, side));
        g.bench_with_input(BenchmarkId::new("backward", &id), &x, |bench, x| {
            bench.iter(|| {
                let mut gw = Array2::<f64>::zeros(w.dim());
                let mut gb = Array1::<f64>::zeros(cout);
                conv3x3_backward(black_box(x), w.view(), &dy, Some(gw.view_mut()), Some(gb.view_mut()))
            })
        });
    }
    g.finish();
}

fn perceptual(c: &mut Criterion) {
    let ext = FeatureExtractor::new(4, ExtractorConfig::default(), 1).unwrap();
    let samples = scenes(16, 32);
    let x = stack_samples(samples.iter());
    let targets = normalized_batch(&ext, &batch((16, 4, 32, 32))).unwrap();
    let refs: Vec<_> = targets.iter().collect();
    let cfg = PerceptualConfig::default();
    let upstream = vec![1.0; 16];
    c.bench_function("perceptual_loss_batch/16x4x32x32", |b| {
        b.iter(|| perceptual_loss_batch(&ext, black_box(&x), &refs, &cfg, None).unwrap())
    });
    c.bench_function("perceptual_loss_batch_grad/16x4x32x32", |b| {
        b.iter(|| perceptual_loss_batch(&ext, black_box(&x), &refs, &cfg, Some(&upstream)).unwrap())
    });
}

fn networks(c: &mut Criterion) {
    let ext = FeatureExtractor::new(4, ExtractorConfig::default(), 1).unwrap();
    let enc = Encoder::new(&ext, ChannelMode::Rgbd, (0..512).collect(), EncoderConfig::default(), 2).unwrap();
    let x = stack_samples(scenes(16, 32).iter());
    c.bench_function("encoder_forward/16x4x32x32", |b| {
        b.iter(|| enc.head_forward(&enc.features(black_box(&x)).unwrap()))
    });
    let dec = Decoder::new(ChannelMode::Rgbd, 512, 32, &DecoderConfig::default(), 3).unwrap();
    let r = weights(16, 512);
    c.bench_function("decoder_forward/16x512", |b| {
        b.iter(|| dec.decode_batch(black_box(&r)).unwrap())
    });
    let v = FmriVector::from_values(r.row(0).to_vec()).unwrap();
    c.bench_function("decoder_decode_single", |b| {
        b.iter(|| dec.decode(black_box(&v)).unwrap())
    });
}

fn ranking(c: &mut Criterion) {
    let ext = FeatureExtractor::new(1, ExtractorConfig::default(), 1).unwrap();
    let depth: Vec<_> = scenes(51, 32).iter().map(|s| s.depth().unwrap()).collect();
    let ids: Vec<String> = (0..51).map(|i| format!("item{i}")).collect();
    let distractors: Vec<(&str, _)> = ids[1..].iter().map(|s| s.as_str()).zip(depth[1..].iter()).collect();
    let cfg = PerceptualConfig::default();
    c.bench_function("rank_identify/50way", |b| {
        b.iter(|| rank_identify(black_box(&depth[0]), (&ids[0], &depth[0]), &distractors, &ext, &cfg).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, perceptual, networks, ranking
}
criterion_main!(benches);
