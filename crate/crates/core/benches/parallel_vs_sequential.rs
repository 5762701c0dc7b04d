use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wikg::checks::{run_suite, SuiteOptions};
use wikg::data::{Bag, CooccurrenceSpec};
use wikg::train::evaluate;
use wikg::{Execution, Model, ModelConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_evaluate(c: &mut Criterion) {
    let spec = CooccurrenceSpec { n_bags: 32, ..CooccurrenceSpec::default() };
    let bags: Vec<Bag> = spec.generate().unwrap().into_iter().map(|g| g.bag).collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    let model = Model::<f32>::init(ModelConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("evaluate_32_bags");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &refs, exec).unwrap())
        });
    }
    group.finish();
}

fn gradcheck_suite(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck_suite_2_seeds");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = SuiteOptions { seeds: 2, exec, ..SuiteOptions::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| run_suite(opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_evaluate, gradcheck_suite);
criterion_main!(benches);
