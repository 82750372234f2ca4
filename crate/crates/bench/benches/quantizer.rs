use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use feddq_bench::update_vector;
use feddq_core::quantizer::{decode, dequantize, encode, quantize};
use feddq_core::rng::{Purpose, RandomStream};

fn bench_quantize(c: &mut Criterion) {
    let mut group = c.benchmark_group("quantize");
    for d in [1_000usize, 100_000] {
        let v = update_vector(d, 1);
        group.throughput(Throughput::Elements(d as u64));
        for bits in [1u8, 4, 8, 16] {
            group.bench_with_input(BenchmarkId::new(format!("{bits}bit"), d), &v, |b, v| {
                let mut rng = RandomStream::keyed(0, 0, 0, Purpose::Quantize);
                b.iter(|| quantize(black_box(v), bits, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_codec(c: &mut Criterion) {
    let mut group = c.benchmark_group("codec");
    let d = 100_000;
    let v = update_vector(d, 2);
    group.throughput(Throughput::Elements(d as u64));
    for bits in [1u8, 3, 8, 13] {
        let payload = quantize(&v, bits, &mut RandomStream::keyed(0, 0, 0, Purpose::Quantize)).unwrap();
        let frame = encode(&payload).unwrap();
        group.bench_with_input(BenchmarkId::new("encode", bits), &payload, |b, p| b.iter(|| encode(black_box(p)).unwrap()));
        group.bench_with_input(BenchmarkId::new("decode", bits), &frame, |b, f| b.iter(|| decode(black_box(f)).unwrap()));
        group.bench_with_input(BenchmarkId::new("dequantize", bits), &payload, |b, p| b.iter(|| dequantize(black_box(p)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_quantize, bench_codec);
criterion_main!(benches);
