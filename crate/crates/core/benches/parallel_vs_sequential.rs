use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use doctor_core::bench::{gen_domains, GeneratorConfig};
use doctor_core::config::ModelConfig;
use doctor_core::exec::Execution;
use doctor_core::pipeline::{Model, Variant};

fn modes() -> [(&'static str, Execution); 2] {
    [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)]
}

fn encode_and_score(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let gen = GeneratorConfig {
        domains: 3,
        per_domain: 16,
        trap_domain: None,
        ..GeneratorConfig::default()
    };
    let bench = gen_domains(&gen, &cfg.dims).unwrap();
    let data = bench.encode(&cfg.dims, 0, Execution::Sequential).unwrap();
    let model = Model::new(&cfg, Variant::Full).unwrap();

    let mut group = c.benchmark_group("encode");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| bench.encode(&cfg.dims, 0, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("trace_all");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| model.trace_all(&data, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, encode_and_score);
criterion_main!(benches);
