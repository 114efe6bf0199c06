//! Hot kernels: attention, bicubic token upsampling, encoder forward passes,
//! one pretraining step and greedy decoding, all on the tiny profile.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mnsp_core::autograd::Tape;
use mnsp_core::data::render::{render_synthetic, RenderStyle};
use mnsp_core::data::{build_views, ViewFlags};
use mnsp_core::model::{encode, scaled_dot_attention, upsample_tokens_bicubic};
use mnsp_core::pretrain::{pretrain_step, Trainer};
use mnsp_core::recognizer::{greedy_decode, FinetuneInit, FinetuneTrainer};
use mnsp_core::rng::rng_from;
use mnsp_core::{Encoder, EncoderConfig, Matrix, ParamStore, RunConfig, TokenSequence};

fn filled(rows: usize, cols: usize, salt: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |(i, j)| ((i * 31 + j * 7) as f64 * 0.01 + salt).sin())
}

fn kernels(c: &mut Criterion) {
    let (q, k, v) = (filled(257, 64, 0.1), filled(257, 64, 0.2), filled(257, 64, 0.3));
    c.bench_function("attention 257x64, 4 heads", |b| {
        b.iter(|| scaled_dot_attention(black_box(&q), black_box(&k), black_box(&v), 4).unwrap())
    });

    let tokens = TokenSequence::new(filled(64, 32, 0.4), (4, 16)).unwrap();
    c.bench_function("bicubic 4x16 -> 8x32, width 32", |b| {
        b.iter(|| upsample_tokens_bicubic(black_box(&tokens), (8, 32)).unwrap())
    });
}

fn models(c: &mut Criterion) {
    let cfg = RunConfig::tiny();
    let sample = render_synthetic("bench", 3, &RenderStyle::default()).unwrap();
    let image = sample.image.resize(32, 128);

    let mut store = ParamStore::new(1);
    let encoder = Encoder::new(&mut store, "encoder", &EncoderConfig::tiny()).unwrap();
    c.bench_function("tiny encoder forward 32x128", |b| {
        b.iter(|| encode(&encoder, &store, black_box(&image), None).unwrap())
    });
    c.bench_function("tiny encoder forward+backward 32x128", |b| {
        b.iter(|| {
            let mut t = Tape::new(&store);
            let out = encoder.forward(&mut t, black_box(&image), None).unwrap();
            let loss = t.sum(out.tokens);
            t.backward(loss)
        })
    });

    let trainer = Trainer::new(&cfg).unwrap();
    let bundle = build_views(&sample, &cfg.scales, &mut rng_from(2), ViewFlags::default(), 0.8, 1).unwrap();
    let bundles = [bundle];
    c.bench_function("tiny pretraining step, 1 sample", |b| {
        b.iter(|| {
            pretrain_step(black_box(&bundles), &trainer.model, &trainer.online, &trainer.teacher, &cfg.pretrain).unwrap()
        })
    });

    let rec = FinetuneTrainer::new(&cfg, FinetuneInit::Scratch).unwrap();
    c.bench_function("tiny greedy decode", |b| {
        b.iter(|| greedy_decode(&rec.model, &rec.store, black_box(&image)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels, models
}
criterion_main!(benches);
