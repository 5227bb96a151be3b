use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use twistor_bench::{calibrated_policy, flat_three_torus, sphere_circle};
use twistor_core::kernels::{kernel_basis, subspace_compare};
use twistor_core::operators::assemble_twistor;

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_basis");
    group.sample_size(10);
    for (label, g) in [("T2xT1 8", flat_three_torus(8)), ("S2xT1 8x16x6", sphere_circle(8, 6))] {
        let op = assemble_twistor(&g, 1).unwrap();
        let policy = calibrated_policy(&g);
        group.bench_function(label, |b| b.iter(|| kernel_basis(black_box(&op), &policy).unwrap()));
    }
    group.finish();
}

fn comparison(c: &mut Criterion) {
    let g = sphere_circle(8, 6);
    let op = assemble_twistor(&g, 1).unwrap();
    let rep = kernel_basis(&op, &calibrated_policy(&g)).unwrap();
    c.bench_function("subspace_compare S2xT1 p=1", |b| {
        b.iter(|| subspace_compare(black_box(&rep.basis), black_box(&rep.basis), 1e-3).unwrap())
    });
}

criterion_group!(benches, kernels, comparison);
criterion_main!(benches);
