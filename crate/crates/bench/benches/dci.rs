use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dci_bench::{oracle_fixture, similarity_fixture};
use dci_core::analysis::{cost_closed_form, cost_recurrence, fano_error_bound, CostParams, TheoryParams};
use dci_core::harness::synthetic_labels;
use dci_core::label_space::{group_least_similar, group_most_similar, group_random, partition_sequential};
use dci_core::{dci_classify, flat_classify, EngineConfig, GroupSize, ImageRef, ParsePolicy, PromptTemplate};

fn partitioning(c: &mut Criterion) {
    let k = GroupSize::new(10).unwrap();
    let mut g = c.benchmark_group("partition");
    for n in [1_000usize, 10_000] {
        let labels = synthetic_labels(n);
        g.bench_with_input(BenchmarkId::new("sequential", n), &labels, |b, l| {
            b.iter(|| partition_sequential(black_box(l), k))
        });
        g.bench_with_input(BenchmarkId::new("random", n), &labels, |b, l| {
            b.iter(|| group_random(black_box(l), k, 7))
        });
    }
    let labels = synthetic_labels(500);
    let sim = similarity_fixture(&labels);
    g.bench_function("most_similar/500", |b| {
        b.iter(|| group_most_similar(black_box(&labels), k, &sim).unwrap())
    });
    g.bench_function("least_similar/500", |b| {
        b.iter(|| group_least_similar(black_box(&labels), k, &sim).unwrap())
    });
    g.finish();
}

fn classify(c: &mut Criterion) {
    let image = ImageRef::Path("bench.png".into());
    let mut g = c.benchmark_group("classify");
    g.sample_size(20);
    for n in [1_000usize, 10_000] {
        let (labels, backend) = oracle_fixture(n, 99f64.ln());
        for k in [10usize, 50] {
            let cfg = EngineConfig::new(GroupSize::new(k).unwrap());
            g.bench_function(BenchmarkId::new(format!("dci_k{k}"), n), |b| {
                b.iter(|| dci_classify(&image, black_box(&labels), &cfg, &backend).unwrap())
            });
        }
        let (policy, template) = (ParsePolicy::default(), PromptTemplate::default());
        g.bench_function(BenchmarkId::new("flat", n), |b| {
            b.iter(|| flat_classify(&image, black_box(&labels), &backend, &policy, &template).unwrap())
        });
    }
    g.finish();
}

fn analysis(c: &mut Criterion) {
    let p = CostParams::new(1_000_000, GroupSize::new(10).unwrap(), 1.0, 1e-6).unwrap();
    c.bench_function("cost/closed_form", |b| b.iter(|| cost_closed_form(black_box(&p))));
    c.bench_function("cost/recurrence", |b| b.iter(|| cost_recurrence(black_box(&p))));
    let t = TheoryParams::new(1_000_000, 1.0, 3.0).unwrap();
    c.bench_function("bounds/fano", |b| b.iter(|| fano_error_bound(black_box(&t))));
}

criterion_group!(benches, partitioning, classify, analysis);
criterion_main!(benches);
