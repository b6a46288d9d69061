//! Sequential versus rayon execution of the data-parallel stages.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use goalpipe::dataset::{embed_dataset_with, sample_uniform};
use goalpipe::distill::DistilledModel;
use goalpipe::env::Encoder;
use goalpipe::goalgen::{finetune_with, retrieve_topk_with};
use goalpipe::par::Exec;
use goalpipe::provider::ConceptLibrary;

fn execs() -> Vec<(&'static str, Exec)> {
    vec![
        ("sequential", Exec::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Exec::Parallel),
    ]
}

fn stages(c: &mut Criterion) {
    let encoder = Encoder::default_views(0);
    let configs = sample_uniform(4096, 0).configs;
    let store = embed_dataset_with(&encoder, &configs, Exec::default()).unwrap();
    let query = ConceptLibrary::build(&encoder, 0).unwrap().lookup("reach-up").unwrap();
    let model = DistilledModel::new(128, 4, 64, 0);
    let candidates = &configs[..64];

    let mut g = c.benchmark_group("stages");
    g.sample_size(10);
    for (name, exec) in execs() {
        g.bench_with_input(BenchmarkId::new("embed_4096", name), &exec, |b, &e| {
            b.iter(|| embed_dataset_with(&encoder, &configs, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("retrieve_top256", name), &exec, |b, &e| {
            b.iter(|| retrieve_topk_with(&store, &query, 256, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("finetune_64x20", name), &exec, |b, &e| {
            b.iter(|| finetune_with(candidates, &query, &model, 20, 0.02, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
