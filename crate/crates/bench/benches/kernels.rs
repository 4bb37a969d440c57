//! Latency of the kernels a streaming window passes through: the FFT, the
//! full log-mel front end, and one forward pass of each classifier.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use roadnoise_core::models::{ast_forward, cnn_forward, AstParams, AstShape, CnnParams, CnnShape};
use roadnoise_core::rng::Rng;
use roadnoise_core::signal::FeatureMatrix;
use roadnoise_core::synth::default_profile;
use roadnoise_core::{
    extract_logmel, fft, quantize_model, quantized_forward, synth_clip, FeatureConfig, RoadClass,
    Standardizer, SynthSpec,
};

fn random_matrix(rng: &mut Rng, h: usize, w: usize) -> FeatureMatrix {
    let values: Vec<f64> = (0..h * w).map(|_| rng.uniform(-3.0, 3.0)).collect();
    FeatureMatrix::from_values(h, w, values, FeatureConfig::default())
}

fn bench_kernels(c: &mut Criterion) {
    let mut rng = Rng::new(17);
    let clip = synth_clip(&SynthSpec {
        profile: default_profile(RoadClass::RoughAsphalt, None).unwrap(),
        speed_kmh: 60.0,
        duration_s: 1.0,
        seed: 17,
    })
    .unwrap();
    let config = FeatureConfig::default();
    let fm = extract_logmel(&clip, &config).unwrap();

    let frame: Vec<f64> = clip.samples[..1024].to_vec();
    c.bench_function("fft_real_1024", |b| {
        b.iter(|| fft::fft_real(black_box(&frame)).unwrap())
    });

    c.bench_function("logmel_1s_window", |b| {
        b.iter(|| extract_logmel(black_box(&clip), &config).unwrap())
    });

    let cnn = CnnParams::init(CnnShape::base(), 1).unwrap();
    c.bench_function("cnn_forward", |b| {
        b.iter(|| cnn_forward(&cnn, black_box(&fm)).unwrap())
    });

    let ast = AstParams::init(AstShape::base(), 1).unwrap();
    c.bench_function("ast_forward", |b| {
        b.iter(|| ast_forward(&ast, black_box(&fm)).unwrap())
    });

    let calib: Vec<FeatureMatrix> =
        (0..32).map(|_| random_matrix(&mut rng, fm.n_mels, fm.n_frames)).collect();
    let qm = quantize_model(&cnn, &Standardizer::identity(fm.n_mels), &calib).unwrap();
    c.bench_function("cnn_int8_forward", |b| {
        b.iter(|| quantized_forward(&qm, black_box(&fm)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_kernels
}
criterion_main!(benches);
