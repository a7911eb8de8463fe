use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sker::embeddings::EmbeddingTable;
use sker::exec::Executor;
use sker::gradcheck;
use sker::linalg::Tensor;
use sker::params::ParamSet;
use sker::sker_model::Mode;
use sker::synonym_graph::GraphSet;
use sker::synthetic::{random_setup, synonym_task, SetupShape, SynonymTaskShape};
use sker::trainer::{build_model, evaluate, TrainConfig};

fn worker_counts() -> Vec<usize> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    if n > 1 { vec![1, n] } else { vec![1, 2] }
}

fn graph_building(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, dim) = (1500, 64);
    let tokens: Vec<String> = (0..n).map(|i| format!("idiom{i}")).collect();
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let table = EmbeddingTable::new(tokens.clone(), Tensor::from_vec(n, dim, data)).unwrap();
    let centers = &tokens[..300];
    let mut group = c.benchmark_group("graph_building");
    for workers in worker_counts() {
        let exec = Executor::new(workers).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(workers), &exec, |b, exec| {
            b.iter(|| GraphSet::from_embeddings(&table, black_box(centers), 0.2, 7, exec).unwrap())
        });
    }
    group.finish();
}

fn batch_gradients_and_eval(c: &mut Criterion) {
    let task = synonym_task(SynonymTaskShape::default(), 2).unwrap();
    let config = TrainConfig::default();
    let model = build_model(&config, &task.train, &[&task.test], &task.graphs, None).unwrap();
    let batch: Vec<usize> = (0..128).collect();

    let mut group = c.benchmark_group("batch_gradients");
    for workers in worker_counts() {
        let exec = Executor::new(workers).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(workers), &exec, |b, exec| {
            b.iter(|| {
                let parts = exec.fold_chunks(&batch, || model.zero_grads(), |grads, _, &i| {
                    let trace = model.forward(&task.train.instances[i], &task.graphs, Mode::Train { seed: i as u64 }).unwrap();
                    model.backward(&trace, 1.0 / 128.0, grads).unwrap();
                });
                parts.into_iter().reduce(|mut a, b| {
                    a.add_assign(&b);
                    a
                })
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluation");
    for workers in worker_counts() {
        let exec = Executor::new(workers).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(workers), &exec, |b, exec| {
            b.iter(|| evaluate(&model, &task.test, &task.graphs, 7, 0, exec).unwrap().accuracy)
        });
    }
    group.finish();
}

fn gradient_check(c: &mut Criterion) {
    let setup = random_setup(SetupShape { d: 8, ..SetupShape::default() }, 3).unwrap();
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for workers in worker_counts() {
        let exec = Executor::new(workers).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(workers), &exec, |b, exec| {
            b.iter(|| {
                gradcheck::check(&setup.model, &setup.instance, &setup.graphs, 0, gradcheck::DEFAULT_EPSILON, exec)
                    .unwrap()
                    .max_relative_error
            })
        });
    }
    group.finish();
}

criterion_group!(benches, graph_building, batch_gradients_and_eval, gradient_check);
criterion_main!(benches);
