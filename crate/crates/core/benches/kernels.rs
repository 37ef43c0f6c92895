use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ringweave::runtime::with_local_ring;
use ringweave::tensor::{add_into_seq, scale_seq};
use ringweave::{ring_allreduce, ReduceOp};

const SIZES: [usize; 3] = [1 << 12, 1 << 16, 1 << 22];

fn add(c: &mut Criterion) {
    let mut g = c.benchmark_group("elementwise_add_f32");
    for len in SIZES {
        let src = vec![1.25f32; len];
        let mut dst = vec![0.5f32; len];
        g.throughput(Throughput::Bytes((len * 4) as u64));
        g.bench_with_input(BenchmarkId::new("sequential", len), &len, |b, _| {
            b.iter(|| add_into_seq(black_box(&mut dst), black_box(&src)))
        });
        #[cfg(feature = "parallel")]
        g.bench_with_input(BenchmarkId::new("parallel", len), &len, |b, _| {
            b.iter(|| ringweave::tensor::add_into_par(black_box(&mut dst), black_box(&src)))
        });
    }
    g.finish();
}

fn scale(c: &mut Criterion) {
    let mut g = c.benchmark_group("scale_f64");
    for len in SIZES {
        let mut buf = vec![3.0f64; len];
        g.throughput(Throughput::Bytes((len * 8) as u64));
        g.bench_with_input(BenchmarkId::new("sequential", len), &len, |b, _| {
            b.iter(|| scale_seq(black_box(&mut buf), black_box(1.0)))
        });
        #[cfg(feature = "parallel")]
        g.bench_with_input(BenchmarkId::new("parallel", len), &len, |b, _| {
            b.iter(|| ringweave::tensor::scale_par(black_box(&mut buf), black_box(1.0)))
        });
    }
    g.finish();
}

/// Whole allreduces on an in-process 4-rank loopback ring, which go through
/// whichever kernel path the build selected.
fn allreduce(c: &mut Criterion) {
    let mut g = c.benchmark_group("ring_allreduce_4_ranks");
    g.sample_size(10);
    for len in [1 << 10, 1 << 20] {
        g.throughput(Throughput::Bytes((len * 4) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, &len| {
            b.iter_custom(|iters| {
                let times = with_local_ring(4, |mut ctx| {
                    let mut buf = vec![1.0f32; len];
                    let started = std::time::Instant::now();
                    for i in 0..iters {
                        ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, i)?;
                    }
                    let took = started.elapsed();
                    ctx.shutdown()?;
                    Ok(took)
                });
                times.into_iter().map(Result::unwrap).max().unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, add, scale, allreduce);
criterion_main!(benches);
