use candle_core::{DType, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rawvid_bench::{random_frame, random_tensor};
use rawvid_core::align::deform_conv2d;
use rawvid_core::bayer::{pack, unpack};
use rawvid_core::isp::{reference_isp_forward, reference_isp_inverse};
use rawvid_core::nn::conv::conv2d;
use rawvid_core::noise::sample_noise;
use rawvid_core::{ModelConfig, NoiseParams, RawVideoDenoiser, ReferenceIspConfig};

fn bayer(c: &mut Criterion) {
    let frame = random_frame(512, 512, 1);
    c.bench_function("pack_512", |b| b.iter(|| pack(black_box(&frame)).unwrap()));
    let packed = pack(&frame).unwrap();
    c.bench_function("unpack_512", |b| b.iter(|| unpack(black_box(&packed)).unwrap()));
}

fn noise(c: &mut Criterion) {
    let frame = random_frame(256, 256, 2);
    let params = NoiseParams::new(1600, 0.01, 0.02).unwrap();
    c.bench_function("sample_noise_256", |b| b.iter(|| sample_noise(black_box(&frame), &params, 7).unwrap()));
}

fn isp(c: &mut Criterion) {
    let frame = random_frame(256, 256, 3);
    let config = ReferenceIspConfig::default();
    c.bench_function("reference_isp_forward_256", |b| b.iter(|| reference_isp_forward(black_box(&frame), &config).unwrap()));
    let srgb = reference_isp_forward(&frame, &config).unwrap();
    c.bench_function("reference_isp_inverse_256", |b| {
        b.iter(|| reference_isp_inverse(black_box(&srgb), &config, frame.meta).unwrap())
    });
}

fn convolutions(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv");
    for channels in [8usize, 16] {
        let x = random_tensor(&[4, channels, 32, 32], DType::F32, 4);
        let w = random_tensor(&[channels, channels, 3, 3], DType::F32, 5);
        group.bench_with_input(BenchmarkId::new("conv2d", channels), &channels, |b, _| {
            b.iter(|| conv2d(black_box(&x), &w, None, 1, 1).unwrap())
        });
        let off = ((random_tensor(&[4, 18, 32, 32], DType::F32, 6) - 0.5).unwrap() * 4.0).unwrap();
        let m = random_tensor(&[4, 9, 32, 32], DType::F32, 7);
        group.bench_with_input(BenchmarkId::new("deform_conv2d", channels), &channels, |b, _| {
            b.iter(|| deform_conv2d(black_box(&x), &off, &m, &w, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("deform_conv2d_backward", channels), &channels, |b, _| {
            let xv = candle_core::Var::from_tensor(&x).unwrap();
            b.iter(|| {
                let y = deform_conv2d(xv.as_tensor(), &off, &m, &w, None).unwrap();
                y.sum_all().unwrap().backward().unwrap()
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let config = ModelConfig { channels: 8, res_blocks: 1, predenoise_guided: false, ..ModelConfig::default() };
    let model = RawVideoDenoiser::new(config, 0, DType::F32, None).unwrap();
    let x: Tensor = random_tensor(&[1, config.frames, 1, 64, 64], DType::F32, 8);
    group.bench_function("forward_64", |b| {
        b.iter(|| model.forward(black_box(&x), rawvid_core::BayerPattern::Rggb).unwrap())
    });
    group.bench_function("forward_backward_64", |b| {
        b.iter(|| {
            let out = model.forward(&x, rawvid_core::BayerPattern::Rggb).unwrap().output;
            out.sum_all().unwrap().backward().unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bayer, noise, isp, convolutions, model);
criterion_main!(benches);
