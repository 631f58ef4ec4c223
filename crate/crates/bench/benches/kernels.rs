use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array4;
use rainsep_core::metrics::{psnr, ssim};
use rainsep_core::network::ops::{conv_forward, Act, ConvSpec};
use rainsep_core::network::{Model, NetworkConfig};
use rainsep_core::rainsynth::{generate_rain_layer, procedural_background, RainParams};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for &(channels, size) in &[(16usize, 64usize), (64, 56)] {
        let x =
            Array4::from_shape_fn((1, channels, size, size), |(_, c, y, x)| ((c + y * 3 + x * 7) % 13) as f32 / 13.0);
        let w = Array4::from_elem((channels, channels, 3, 3), 0.01f32);
        let b = vec![0.0f32; channels];
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 1, dilation: 1 };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{channels}ch_{size}px")), &x, |bench, x| {
            bench.iter(|| conv_forward(black_box(x), &w, &b, spec, None, Act::Relu))
        });
    }
    group.finish();
}

fn derain(c: &mut Criterion) {
    let cfg = NetworkConfig {
        patch: 64,
        encoder_channels: [16, 32, 64, 64, 64],
        composition_channels: vec![16],
        discriminator_channels: [8, 8, 16, 16],
        ..Default::default()
    };
    let model = Model::init(cfg).unwrap();
    let image = procedural_background(128, 128, 3, 1);
    c.bench_function("derain_compact_128px", |b| b.iter(|| model.derain(black_box(&image)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let x = procedural_background(256, 256, 3, 2);
    let y = procedural_background(256, 256, 3, 3);
    c.bench_function("ssim_256px", |b| b.iter(|| ssim(black_box(&x), black_box(&y)).unwrap()));
    c.bench_function("psnr_256px", |b| b.iter(|| psnr(black_box(&x), black_box(&y)).unwrap()));
}

fn rain(c: &mut Criterion) {
    let p = RainParams { num_overlays: 3, ..RainParams::default() };
    c.bench_function("rain_layer_224px", |b| b.iter(|| generate_rain_layer(224, 224, black_box(&p)).unwrap()));
}

criterion_group!(benches, conv, derain, metrics, rain);
criterion_main!(benches);
