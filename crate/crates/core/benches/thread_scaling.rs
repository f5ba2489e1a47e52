//! Compares the data-parallel kernels against a single-thread pool.
//!
//! With the default `parallel` feature the two arms differ only in rayon
//! pool width (outputs are bit-identical); built without the feature both
//! arms run the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use edit_core::mechanism::{run_mechanism, MechanismInputs};
use edit_core::weights::generate;
use edit_core::{AttentionConfig, Mechanism};

fn bench_mechanisms(c: &mut Criterion) {
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");

    for (mech, grid) in [
        (Mechanism::Sdpa, 32usize),
        (Mechanism::Edit, 64),
        (Mechanism::Hybrid, 64),
    ] {
        let cfg = AttentionConfig::new(mech, 64, 4, grid, grid, 16).unwrap();
        let store = generate(&cfg, 42).unwrap();
        let inputs = MechanismInputs::seeded(&cfg, 42).unwrap();
        let mut group = c.benchmark_group(format!("{}/{}x{}", cfg.mechanism.id(), grid, grid));
        group.sample_size(10);
        group.bench_function(BenchmarkId::new("threads", "all"), |b| {
            b.iter(|| run_mechanism(&cfg, &store, &inputs).unwrap())
        });
        group.bench_function(BenchmarkId::new("threads", "1"), |b| {
            b.iter(|| single.install(|| run_mechanism(&cfg, &store, &inputs).unwrap()))
        });
        group.finish();
    }
}

criterion_group!(benches, bench_mechanisms);
criterion_main!(benches);
