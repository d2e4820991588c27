use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rjepa::analysis::{run_mode, BenchMode};
use rjepa_bench::fixture;

const T: usize = 100;

fn per_mode(c: &mut Criterion, mode: BenchMode, sizes: &[usize]) {
    let mut group = c.benchmark_group(mode.name());
    group.sample_size(10);
    for &n in sizes {
        let (w, xs) = fixture(n, T, 7);
        group.throughput(Throughput::Elements(T as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| run_mode(mode, &w, std::hint::black_box(&xs)).unwrap())
        });
    }
    group.finish();
}

fn sensitivity(c: &mut Criterion) {
    per_mode(c, BenchMode::Rfp, &[32, 64, 128, 256]);
    per_mode(c, BenchMode::Bptt, &[32, 64, 128, 256]);
    // the dense sensitivity is 8n³ reals per step
    per_mode(c, BenchMode::FullRtrl, &[8, 16, 32]);
}

criterion_group!(benches, sensitivity);
criterion_main!(benches);
