use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use decopt::consensus::consensus_step;
use decopt::netgraph::{build_laplacian, generate_graph, metropolis_mixing, spectral_summary, SpectralKind};
use decopt::oracle::{two_point_estimate, OracleSuite};
use decopt::primal::{extra, RunSpec};
use decopt::problems::{make_logistic, make_quadratic, solve_reference};
use decopt::rng::rng_from_seed;
use decopt::{DMatrix, DVector, GraphFamily, NodeState};
use std::hint::black_box;

fn consensus(c: &mut Criterion) {
    let g = generate_graph(GraphFamily::ErdosRenyi, 16, 1).unwrap();
    let mm = metropolis_mixing(&g).unwrap();
    let x = NodeState::from_matrix(DMatrix::from_fn(16, 50, |i, j| ((i * 31 + j * 7) % 13) as f64));
    c.bench_function("consensus_step_16x50", |b| b.iter(|| consensus_step(&mm, black_box(&x)).unwrap()));
    let w = build_laplacian(&generate_graph(GraphFamily::Path, 64, 0).unwrap());
    c.bench_function("spectral_summary_path64", |b| {
        b.iter(|| spectral_summary(black_box(w.as_matrix()), SpectralKind::Laplacian).unwrap())
    });
}

fn extra_run(c: &mut Criterion) {
    let p = make_quadratic(8, 10, 10.0, 2).unwrap();
    let mm = metropolis_mixing(&generate_graph(GraphFamily::Cycle, 8, 0).unwrap()).unwrap();
    let f_star = solve_reference(&p, 1e-10).unwrap().f_star;
    let x0 = NodeState::zeros(8, 10);
    c.bench_function("extra_500_iters", |b| {
        b.iter(|| extra(&p, &mm, 0.05, &x0, RunSpec::new(500, f_star)).unwrap())
    });
}

fn two_point(c: &mut Criterion) {
    let p = make_logistic(1, 50, 40, 0.1, 3).unwrap();
    let f = &p.nodes[0];
    let x = DVector::from_element(50, 0.1);
    c.bench_function("two_point_logistic_50", |b| {
        b.iter_batched(
            || (OracleSuite::exact(f), rng_from_seed(4)),
            |(mut s, mut rng)| two_point_estimate(&mut s, &x, 1e-3, &mut rng),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, consensus, extra_run, two_point);
criterion_main!(benches);
