use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rotcnn::cnn::Family;
use rotcnn::compiler::{compile_hmax, lemma4_schedule, verify_compilation, Head};
use rotcnn::harness::{empirical_risk, experiment_architecture, GridPoint};
use rotcnn::hmax::{rotated_spec, GFunc};
use rotcnn::synth::generate_dataset;
use rotcnn::train::{backward, initialize, InitScheme};
use rotcnn::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn batch_forward(c: &mut Criterion) {
    let data = generate_dataset(64, 32, 1, Exec::Parallel).unwrap();
    let tpl = experiment_architecture(Family::F3, 32, GridPoint { l: 2, k: 2, ln: 1, t: 2 }).unwrap();
    let arch = initialize(&tpl, InitScheme::GlorotUniform, 3);
    let mut g = c.benchmark_group("batch_forward");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| empirical_risk(&arch, &data.images, &data.labels, exec).unwrap())
        });
    }
    g.finish();
    c.bench_function("batch_backward/sequential", |b| {
        b.iter(|| backward(&arch, &data.images[..16], &data.labels[..16]).unwrap())
    });
}

fn dataset_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("dataset_generation");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(64, 32, 5, exec).unwrap())
        });
    }
    g.finish();
}

fn verification(c: &mut Criterion) {
    let funcs = vec![vec![GFunc::Identity; 16], vec![GFunc::Max4; 4], vec![GFunc::Mean4]];
    let spec = rotated_spec(12, 0.2, 2, funcs).unwrap();
    let arch = compile_hmax(&spec, &lemma4_schedule(&spec).unwrap(), Head::MaxNetwork).unwrap();
    let mut g = c.benchmark_group("verification");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| verify_compilation(&spec, &arch, 32, 0, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_forward, dataset_generation, verification);
criterion_main!(benches);
