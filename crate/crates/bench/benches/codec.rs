use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mscs_core::codec::{decode, encode};

fn codec(c: &mut Criterion) {
    let mut group = c.benchmark_group("codec");
    for n in [1, 8, 64] {
        let msg = mscs_bench::request(n);
        let bytes = encode(&msg).unwrap();
        group.bench_with_input(BenchmarkId::new("encode", n), &msg, |b, m| {
            b.iter(|| encode(black_box(m)))
        });
        group.bench_with_input(BenchmarkId::new("decode", n), &bytes, |b, x| {
            b.iter(|| decode(black_box(x)))
        });
    }
    let garbage: Vec<u8> = (0..2048u32)
        .map(|i| (i.wrapping_mul(2654435761) >> 13) as u8)
        .collect();
    group.bench_function("decode_garbage_2k", |b| {
        b.iter(|| decode(black_box(&garbage)))
    });
    group.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
