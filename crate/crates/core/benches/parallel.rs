use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bmdsel::focused::project_all;
use bmdsel::likelihood::fit_all;
use bmdsel::{load_dataset, run_experiment, standardize_doses, Design, Execution, ExperimentConfig, ModelSpec, PavaFit};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn simulation(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::preset("expt1", None, None).unwrap();
    cfg.mreps = 64;
    let mut group = c.benchmark_group("run_experiment");
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| run_experiment(&cfg, mode).unwrap())
        });
    }
    group.finish();
}

fn projections(c: &mut Criterion) {
    let raw = load_dataset(include_str!("../../../data/bcme.csv").as_bytes()).unwrap();
    let data = standardize_doses(&raw).unwrap();
    let fits = fit_all(&data, &ModelSpec::STANDARD);
    let pava = PavaFit::from_data(&data);
    let design = Design::from_data(&data);
    let mut group = c.benchmark_group("project_all");
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| project_all(&design, &fits, &pava, mode))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = simulation, projections
}
criterion_main!(benches);
