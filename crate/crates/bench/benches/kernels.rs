use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use muster_core::attention::{light_attention_full, w_mska_map, LightAttnParams, MskaParams};
use muster_core::decoder::{decoder_forward, init_params, synth_backbone};
use muster_core::kernels;
use muster_core::{DecoderConfig, Rng, Tensor, Variant};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let mut rng = Rng::new(1);
        let a: Tensor<f32> = rng.normal_tensor(&[n, n], 0.0, 1.0);
        let b: Tensor<f32> = rng.normal_tensor(&[n, n], 0.0, 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| kernels::matmul(&a, &b).unwrap()));
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let x: Tensor<f32> = rng.normal_tensor(&[48, 48, 64], 0.0, 1.0);
    let p = MskaParams::random(64, 4, 12, &mut rng).unwrap();
    let lp = LightAttnParams::random(64, 4, 12, &mut rng).unwrap();
    c.bench_function("w_mska_map 48x48x64 M=12", |b| b.iter(|| w_mska_map(&x, &x, &p).unwrap()));
    c.bench_function("light_attention 48x48x64 M=12 shifted", |b| b.iter(|| light_attention_full(&x, &x, &lp, true).unwrap()));
}

fn decoder(c: &mut Criterion) {
    let mut g = c.benchmark_group("decoder_forward 128x128 C=16");
    g.sample_size(10);
    let feats = synth_backbone(128, 128, 16, 3).unwrap();
    for variant in [Variant::Muster, Variant::Light] {
        let cfg = DecoderConfig { window: 4, ..DecoderConfig::new(16, variant, 5) };
        let params = init_params(&cfg).unwrap();
        g.bench_function(format!("{variant:?}"), |b| b.iter(|| decoder_forward(&feats, &cfg, &params).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, matmul, attention, decoder);
criterion_main!(benches);
