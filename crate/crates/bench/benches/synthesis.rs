use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pko_core::experiment::{fit_model, Benchmark, ExperimentConfig};
use pko_core::synthesis::{build_lmi, solve_gain, verify_certificate};

fn synthesis(c: &mut Criterion) {
    let config = ExperimentConfig::preset(Benchmark::Vdp);
    let model = fit_model(&config).expect("fit");
    let spec = config.synthesis.search_spec();
    let kappa = config.observers.kappa.clone();
    let cert = solve_gain(&model, &kappa, model.rho(), &spec).expect("feasible");
    let problem = cert.problem(&model).expect("problem");

    let mut group = c.benchmark_group("synthesis");
    group.sample_size(10);
    group.bench_function("fit_vdp", |b| b.iter(|| fit_model(black_box(&config)).unwrap()));
    group.bench_function("solve_gain_vdp", |b| {
        b.iter(|| solve_gain(black_box(&model), &kappa, model.rho(), &spec).unwrap())
    });
    group.bench_function("build_lmi", |b| {
        b.iter(|| build_lmi(&problem.a, &problem.c_o, &kappa, problem.rho, &cert.lambda, problem.margin).unwrap())
    });
    group.bench_function("verify_certificate", |b| {
        b.iter(|| verify_certificate(black_box(&cert), &problem).unwrap())
    });
    group.finish();
}

criterion_group!(benches, synthesis);
criterion_main!(benches);
