use criterion::{criterion_group, criterion_main, Criterion};
use maccif_core::evaluation::{det_metrics, Scored};
use maccif_core::features::{extract_features, random_crop, Waveform, SAMPLE_RATE};
use maccif_core::training::{batch_tensor, make_synthetic_corpus, train_step, Adam, SyntheticSpec, TrainConfig};
use maccif_core::{Model, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn mfcc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = (0..3 * SAMPLE_RATE as usize).map(|_| rng.random_range(-0.5..0.5)).collect();
    let wave = Waveform::new(samples, SAMPLE_RATE).unwrap();
    c.bench_function("mfcc 3 s utterance", |b| b.iter(|| black_box(extract_features(&wave).unwrap())));
}

fn step(c: &mut Criterion) {
    let corpus = make_synthetic_corpus(&SyntheticSpec::desk(0)).unwrap();
    let cfg = TrainConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let crops: Vec<_> = corpus.dataset.utterances[..cfg.batch_size]
        .iter()
        .map(|u| random_crop(&u.feats, cfg.crop_frames, &mut rng).coeffs)
        .collect();
    let targets: Vec<usize> = corpus.dataset.utterances[..cfg.batch_size].iter().map(|u| u.speaker).collect();
    let batch = batch_tensor(&crops.iter().collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("desk train step");
    group.sample_size(10);
    for (name, net) in [("full", NetworkConfig::desk()), ("baseline", NetworkConfig::desk().ablate_to_baseline())] {
        let mut model = Model::new(net, 0).unwrap();
        let mut adam = Adam::new(cfg.adam(), cfg.weight_decay);
        group.bench_function(name, |b| {
            b.iter(|| black_box(train_step(&mut model, &mut adam, batch.clone(), &targets, 1e-4).unwrap()))
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trials: Vec<Scored> = (0..10_000)
        .map(|i| {
            let target = i % 10 == 0;
            Scored {
                score: rng.random_range(-1.0..1.0) + if target { 0.8 } else { 0.0 },
                target,
            }
        })
        .collect();
    c.bench_function("eer+min_dcf 10k trials", |b| b.iter(|| black_box(det_metrics(&trials).unwrap())));
}

criterion_group!(benches, mfcc, step, scoring);
criterion_main!(benches);
