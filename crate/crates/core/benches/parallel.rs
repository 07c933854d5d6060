//! Sequential vs Parallel on the four data-parallel workloads.
//!
//! `cargo bench -p kam-core --bench parallel`

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kam_core::diophantine::verify_diophantine_with;
use kam_core::embedding::Embedding;
use kam_core::hamiltonian::{builtin_family, FamilyOptions};
use kam_core::orbit::{orbit_check, OrbitOptions};
use kam_core::par::Exec;
use kam_core::smoothing::{bernstein_approximant, ck_table, family_fn, BernsteinCaps, CkOptions, SampleSet, ScalarFn};

const GOLDEN: f64 = 1.618_033_988_749_895;
const POLICIES: [(&str, Exec); 2] = [("Sequential", Exec::Sequential), ("Parallel", Exec::Parallel)];

fn diophantine_scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("diophantine_scan");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::new(name, "n=2 kmax=2000"), |b| {
            b.iter(|| verify_diophantine_with(black_box(&[1.0, GOLDEN]), 0.1, 1.2, 2000, exec).unwrap())
        });
    }
    g.finish();
}

fn orbit_samples(c: &mut Criterion) {
    let h = builtin_family("forced_rotator", 1, &FamilyOptions { epsilon: 1e-3, ..FamilyOptions::default() }).unwrap();
    let k = Embedding::flat(1, 16, &[GOLDEN]);
    let mut g = c.benchmark_group("orbit_samples");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        let opts = OrbitOptions { t_final: 5.0, dt: 1e-3, n_samples: 32, exec, ..OrbitOptions::default() };
        g.bench_function(BenchmarkId::new(name, "32 samples T=5"), |b| {
            b.iter(|| orbit_check(&h, &[0.0, 0.0], &k, &[GOLDEN], black_box(&opts)).unwrap())
        });
    }
    g.finish();
}

fn grid_evaluations(c: &mut Criterion) {
    let o = FamilyOptions { epsilon: 1e-4, cutoff: 512, ..FamilyOptions::default() };
    let f = family_fn(&builtin_family("finite_smoothness", 1, &o).unwrap());
    let k = Embedding::flat(1, 16, &[GOLDEN]);
    let samples = SampleSet::tube(&k, 0.02, &[-0.02, -0.02], &[0.02, 0.02], 8);
    let mut g = c.benchmark_group("grid_evaluations");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        let opts = CkOptions { exec, ..CkOptions::default() };
        g.bench_function(BenchmarkId::new(name, "C3 table on a 2r tube"), |b| {
            b.iter(|| ck_table(&f, black_box(&samples), &opts))
        });
    }
    g.finish();
}

fn bernstein_sums(c: &mut Criterion) {
    let f: ScalarFn = Arc::new(|z: &[f64]| (z[0] + 0.5 * z[1]).sin() * z[2].exp());
    let lower = [0.0, 0.0, 0.0];
    let upper = [1.0, 1.0, 1.0];
    let mut g = c.benchmark_group("bernstein_sums");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::new(name, "3-d degree 24"), |b| {
            b.iter(|| {
                let p = bernstein_approximant(&f, &lower, &upper, &[24, 24, 24], BernsteinCaps::default(), exec).unwrap();
                black_box(p.eval(&[0.3, 0.6, 0.9]))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, diophantine_scan, orbit_samples, grid_evaluations, bernstein_sums);
criterion_main!(benches);
