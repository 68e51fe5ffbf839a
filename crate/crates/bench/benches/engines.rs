use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use revprop_bench::{fixture, isotropic};
use revprop_core::{step, EngineKind, MemoryLedger};

fn engines(c: &mut Criterion) {
    let mut group = c.benchmark_group("step/depth12-d64");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    let batch = 8;
    let (model, data) = fixture(&isotropic(12, 64, 16), batch);
    group.throughput(Throughput::Elements(batch as u64));
    for kind in EngineKind::ALL {
        group.bench_function(kind.name(), |b| {
            let mut ledger = MemoryLedger::new();
            b.iter(|| step(kind, &model, &data, &mut ledger, 2).unwrap());
        });
    }
    group.finish();
}

fn depth(c: &mut Criterion) {
    let mut group = c.benchmark_group("step/depth");
    group.sample_size(10);
    for depth in [2, 4, 8] {
        let (model, data) = fixture(&isotropic(depth, 32, 8), 4);
        for kind in EngineKind::ALL {
            group.bench_with_input(BenchmarkId::new(kind.name(), depth), &depth, |b, _| {
                let mut ledger = MemoryLedger::new();
                b.iter(|| step(kind, &model, &data, &mut ledger, 2).unwrap());
            });
        }
    }
    group.finish();
}

criterion_group!(benches, engines, depth);
criterion_main!(benches);
