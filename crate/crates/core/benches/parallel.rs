//! Sequential against data-parallel execution of the per-element kernels.
//! Build with `--no-default-features` to compare against a binary without rayon.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mixot::assembly::{assemble_mass, Regularization};
use mixot::density::{project_density, DensitySource};
use mixot::fespace::{DualOrder, SpaceConfig, Spaces, VelocityFamily};
use mixot::mesh::{build_structured_quadrilateral, TimeGrid};
use mixot::solver::Backend;
use mixot::transport::*;
use mixot::Exec;
use std::hint::black_box;

fn problem(n: usize) -> TransportProblem {
    let spaces = Spaces::new(
        build_structured_quadrilateral(n, n),
        TimeGrid::uniform(n),
        SpaceConfig::new(VelocityFamily::Rtq0, DualOrder::P1),
    )
    .unwrap();
    let c = [0.5, 0.5];
    let r0 = project_density(&spaces.mesh, &DensitySource::CosinePair { center: c, initial: true }).unwrap();
    let r1 = project_density(&spaces.mesh, &DensitySource::CosinePair { center: c, initial: false }).unwrap();
    TransportProblem::new(spaces, r0, r1, Regularization::None).unwrap()
}

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn kernels(c: &mut Criterion) {
    let p = problem(24);
    let s = &p.spaces;
    let sigma = initial_guess(&p, Initialization::Interpolation);
    let q = project_dual_space(s, &sigma, Exec::Sequential);

    let mut g = c.benchmark_group("kernels");
    for (name, exec) in POLICIES {
        g.bench_with_input(BenchmarkId::new("step2_vertexwise", name), &exec, |b, &e| {
            b.iter(|| black_box(step2(s, &q, &sigma, &sigma, 1.0, DualProjection::Vertexwise, e)))
        });
        g.bench_with_input(BenchmarkId::new("action", name), &exec, |b, &e| {
            b.iter(|| black_box(evaluate_action(s, &sigma, e)))
        });
        g.bench_with_input(BenchmarkId::new("lift_dual", name), &exec, |b, &e| {
            b.iter(|| black_box(lift_dual(s, &q, e)))
        });
        g.bench_with_input(BenchmarkId::new("assemble_mass", name), &exec, |b, &e| {
            b.iter(|| black_box(assemble_mass(s, e)))
        });
    }
    g.finish();
}

fn iterations(c: &mut Criterion) {
    let p = problem(16);
    let mut g = c.benchmark_group("pdhg_iteration");
    g.sample_size(20);
    for (name, exec) in POLICIES {
        let config = PdhgConfig { exec, backend: Backend::TimeModes, stop_tol: 0.0, ..Default::default() };
        let mut state = Pdhg::new(&p, config).unwrap();
        g.bench_function(BenchmarkId::new("time_modes", name), |b| b.iter(|| black_box(state.step().unwrap())));
    }
    g.finish();
}

criterion_group!(benches, kernels, iterations);
criterion_main!(benches);
