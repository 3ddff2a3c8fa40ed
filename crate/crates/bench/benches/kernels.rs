use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use maccif_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::uniform(&[256, 384], 1.0, &mut rng);
    let b = Tensor::uniform(&[384, 128], 1.0, &mut rng);
    c.bench_function("matmul 256x384x128 forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (x, y) = (tape.param(a.clone(), "a"), tape.param(b.clone(), "b"));
            let z = tape.matmul(x, y).unwrap();
            let loss = tape.sum_all(z);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[16, 128, 32], 1.0, &mut rng);
    let w = Tensor::uniform(&[128, 128, 3], 0.1, &mut rng);
    let bias = Tensor::uniform(&[128], 0.1, &mut rng);
    let mut group = c.benchmark_group("conv1d desk block");
    group.bench_function("forward", |bench| {
        bench.iter_batched(
            Tape::new,
            |mut tape| {
                let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
                black_box(tape.conv1d(xv, wv, bv, 3).unwrap());
            },
            BatchSize::SmallInput,
        )
    });
    group.bench_function("forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.param(x.clone(), "x"), tape.param(w.clone(), "w"), tape.param(bias.clone(), "b"));
            let y = tape.conv1d(xv, wv, bv, 3).unwrap();
            let loss = tape.sum_all(y);
            black_box(tape.backward(loss).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, conv);
criterion_main!(benches);
