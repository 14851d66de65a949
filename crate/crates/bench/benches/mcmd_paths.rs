//! Compares the discrepancy compute paths across sample counts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use condalign::embedding::{fit_cme, mcmd_squared_within_path, ComputePath};
use condalign::{DenseMatrix, FeatureSet, KernelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(m: usize, c: usize, d: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(m * d);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let y = i % c;
        labels.push(y as i64);
        for k in 0..d {
            let center = if k == y % d { 2.0 } else { 0.0 };
            data.push(center + rng.gen_range(-1.0..1.0));
        }
    }
    FeatureSet::labeled(DenseMatrix::new(m, d, data).unwrap(), labels).unwrap()
}

fn bench_paths(crit: &mut Criterion) {
    let kz = KernelSpec::gaussian(1.5).unwrap();
    let ky = KernelSpec::gaussian(1.0).unwrap();
    let mut group = crit.benchmark_group("mcmd_within");
    group.sample_size(10);
    for &m in &[200usize, 400, 800] {
        let data = dataset(m, 3, 4, 7);
        let op = fit_cme(&data, &kz, &ky, 1e-3).unwrap();
        group.bench_with_input(BenchmarkId::new("woodbury", m), &m, |b, _| {
            b.iter(|| mcmd_squared_within_path(&op, 0, 1, ComputePath::Woodbury).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", m), &m, |b, _| {
            b.iter(|| mcmd_squared_within_path(&op, 0, 1, ComputePath::Naive).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rff", m), &m, |b, _| {
            b.iter(|| {
                mcmd_squared_within_path(&op, 0, 1, ComputePath::Rff { rank: 1024, seed: 7 })
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_paths);
criterion_main!(benches);
