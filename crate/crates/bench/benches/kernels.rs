use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use geoclap_core::audio::{MelExtractor, WaveformClip};
use geoclap_core::contrastive::loss_and_grads;
use geoclap_core::dataset::{generate_synthetic_triplets, SyntheticGenConfig};
use geoclap_core::embedding::cosine_similarity_matrix;
use geoclap_core::{LossMode, Modality, ModelConfig, ModelSnapshot};

fn similarity(c: &mut Criterion) {
    let data = generate_synthetic_triplets(&SyntheticGenConfig::new(1024, 1)).unwrap();
    let snap = ModelSnapshot::init(ModelConfig::with_dims(512, 256, data.features.widths().unwrap()), 1).unwrap();
    let ids = data.features.ids();
    let batch = data.features.batch(&ids).unwrap();
    let a = snap.encode(Modality::Audio, ids.clone(), batch.audio.view()).unwrap();
    let i = snap.encode(Modality::Image, ids, batch.image.view()).unwrap();
    c.bench_function("cosine_similarity_1024x1024_d512", |b| b.iter(|| cosine_similarity_matrix(black_box(&a), black_box(&i)).unwrap()));
}

fn mel(c: &mut Criterion) {
    let sr = 48_000;
    let samples = (0..sr as usize * 10).map(|k| (k as f64 * 0.07).sin() * 0.5).collect();
    let clip = WaveformClip::new(samples, sr).unwrap();
    let ex = MelExtractor::new(Default::default()).unwrap();
    c.bench_function("mel_spectrogram_10s_48k", |b| b.iter(|| ex.compute(black_box(&clip)).unwrap()));
}

fn loss(c: &mut Criterion) {
    let data = generate_synthetic_triplets(&SyntheticGenConfig::new(64, 2)).unwrap();
    let snap = ModelSnapshot::init(ModelConfig::with_dims(128, 256, data.features.widths().unwrap()), 2).unwrap();
    let batch = data.features.batch(&data.features.ids()).unwrap();
    let mut g = c.benchmark_group("loss_and_grads_b64");
    for mode in LossMode::ALL {
        g.bench_function(mode.as_str(), |b| {
            b.iter_batched(|| batch.clone(), |bt| loss_and_grads(&snap, &bt, mode).unwrap(), BatchSize::SmallInput)
        });
    }
    g.finish();
}

criterion_group!(benches, similarity, mel, loss);
criterion_main!(benches);
