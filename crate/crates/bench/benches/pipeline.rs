use convfocus::beamformer::{make_target, max_di_weights};
use convfocus::tracker::assign;
use convfocus::wola::process_stream;
use convfocus_bench::{costs, glasses_atf, noise, stft, SAMPLE_RATE};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn weights(c: &mut Criterion) {
    let set = glasses_atf(642);
    let cov = set.isotropic_covariance();
    let target = make_target(&set, 17, 0).unwrap();
    c.bench_function("max_di_weights/513_bins_6_mics", |b| {
        b.iter(|| max_di_weights(black_box(&cov), black_box(&target), 1e-3).unwrap())
    });
    c.bench_function("isotropic_covariance/642_dirs", |b| {
        b.iter(|| black_box(&set).isotropic_covariance())
    });
}

fn stream(c: &mut Criterion) {
    let set = glasses_atf(642);
    let cov = set.isotropic_covariance();
    let w = max_di_weights(&cov, &make_target(&set, 17, 0).unwrap(), 1e-3).unwrap();
    let x = noise(6, 2.0, 1);
    let cfg = stft();
    let mut g = c.benchmark_group("process_stream");
    g.throughput(Throughput::Elements((2.0 * SAMPLE_RATE) as u64));
    g.sample_size(20);
    g.bench_function("6ch_2s", |b| {
        b.iter(|| process_stream(black_box(x.view()), &cfg, |_, _| Ok(&w)).unwrap())
    });
    g.finish();
}

fn assignment(c: &mut Criterion) {
    let mut g = c.benchmark_group("assign");
    for n in [4usize, 16, 64] {
        let m = costs(n, 200.0, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| assign(black_box(m), 100.0))
        });
    }
    g.finish();
}

criterion_group!(benches, weights, stream, assignment);
criterion_main!(benches);
