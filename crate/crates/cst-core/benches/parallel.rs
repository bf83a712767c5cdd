//! Compares the data-parallel operator paths against their sequential
//! twins. With the `parallel` feature off, both sides run sequentially and
//! the comparison degenerates to a sanity check.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use cst_core::geometry::{build_energy_grid, ComptonSpec, EnergyGrid, SystemGeometry};
use cst_core::operator::{assemble, assemble_seq, ImageGrid, SparseOperator};

struct Setup {
    geom: SystemGeometry,
    energies: EnergyGrid,
    img: ImageGrid,
    op: SparseOperator,
    image: Vec<f64>,
    sino: Vec<f64>,
}

fn setup() -> Setup {
    let spec = ComptonSpec::new(0.3).unwrap();
    let span = spec.e0 - spec.e_min();
    let geom = SystemGeometry::new(1.0, 32).unwrap();
    let energies = build_energy_grid(&spec, span / 48.0).unwrap();
    let img = ImageGrid::new(64, 64, 1.0).unwrap();
    let op = assemble(&geom, &energies, &img, 4).unwrap();
    let image: Vec<f64> = (0..img.h * img.w).map(|i| (i % 7) as f64 * 0.1).collect();
    let sino: Vec<f64> = (0..op.m).map(|i| (i % 5) as f64 * 0.2).collect();
    Setup { geom, energies, img, op, image, sino }
}

fn bench_assemble(c: &mut Criterion) {
    let s = setup();
    let mut group = c.benchmark_group("assemble");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| assemble(&s.geom, &s.energies, &s.img, 4).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| assemble_seq(&s.geom, &s.energies, &s.img, 4).unwrap())
    });
    group.finish();
}

fn bench_apply(c: &mut Criterion) {
    let s = setup();
    let mut group = c.benchmark_group("forward");
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || s.image.clone(),
            |x| s.op.apply(&x).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || s.image.clone(),
            |x| s.op.apply_seq(&x).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_adjoint(c: &mut Criterion) {
    let s = setup();
    let mut group = c.benchmark_group("adjoint");
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || s.sino.clone(),
            |y| s.op.apply_adjoint(&y).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || s.sino.clone(),
            |y| s.op.apply_adjoint_seq(&y).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_assemble, bench_apply, bench_adjoint);
criterion_main!(benches);
