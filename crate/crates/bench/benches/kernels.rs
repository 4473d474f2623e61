use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dmao_bench::normal;
use dmao_core::ctc::{ctc_loss, LabelSeq};
use dmao_core::tensor::Tape;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let (a, b) = (normal(&[n, n], 1), normal(&[n, n], 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone()).unwrap();
                let y = tape.constant(b.clone()).unwrap();
                black_box(tape.matmul(x, y).unwrap())
            })
        });
    }
    group.finish();
}

fn ctc(c: &mut Criterion) {
    let mut group = c.benchmark_group("ctc_loss");
    for frames in [16usize, 64, 256] {
        let mut tape = Tape::new();
        let x = tape.constant(normal(&[frames, 9], 3)).unwrap();
        let lp = tape.log_softmax(x).unwrap();
        let log_probs = tape.value(lp).clone();
        let labels = LabelSeq::new((0..frames / 4).map(|i| 1 + i % 8).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |bench, _| {
            bench.iter(|| black_box(ctc_loss(&log_probs, &labels).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, ctc);
criterion_main!(benches);
