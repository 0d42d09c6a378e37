//! Parallel vs sequential throughput of the data-parallel paths.
//!
//! `par` rows go through `par::map` (rayon in the default build); `seq` rows
//! do the same work with plain iterators. Run with
//! `--no-default-features` to benchmark the sequential fallback build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fairflow::datagen::{generate, Example, GeneratorConfig};
use fairflow::encoder::{BranchId, EncoderConfig, Model, TokenSeq};
use fairflow::harness::{run_many, run_one, RunSpec};
use fairflow::par;
use fairflow::train::TrainConfig;
use fairflow::{Graph, Segment};
use fairflow::Tensor;
use std::hint::black_box;

fn data(n: usize) -> Vec<Example> {
    let cfg = GeneratorConfig {
        n_train: n,
        n_id: 30,
        n_stress: 30,
        n_ood: 30,
        n_transfer: 30,
        ..Default::default()
    };
    generate(&cfg).unwrap().train
}

fn mode() -> &'static str {
    if par::enabled() {
        "par"
    } else {
        "par-disabled"
    }
}

fn predict(c: &mut Criterion) {
    let model = Model::<f64>::new(EncoderConfig::default(), &[], 0).unwrap();
    let seqs: Vec<TokenSeq> = data(512).iter().map(|e| TokenSeq::join(&e.c, 0)).collect();
    let mut g = c.benchmark_group("predict_batch_512");
    g.sample_size(10);
    g.bench_function(mode(), |b| b.iter(|| black_box(model.predict_batch(&seqs, BranchId::Intact, None, 64).unwrap())));
    g.bench_function("seq", |b| {
        b.iter(|| {
            let out: Vec<_> = seqs.chunks(64).map(|c| model.predict_batch(c, BranchId::Intact, None, usize::MAX).unwrap()).collect();
            black_box(out)
        })
    });
    g.finish();
}

fn attention(c: &mut Criterion) {
    let (b, l, d) = (32, 12, 32);
    let x = Tensor::new(vec![b * l, d], (0..b * l * d).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect()).unwrap();
    let segs: Vec<Segment> = (0..b).map(|i| Segment { start: i * l, len: l }).collect();
    let mut g = c.benchmark_group("attention_fwd_bwd");
    g.sample_size(20);
    g.bench_function(BenchmarkId::new(mode(), format!("{b}x{l}x{d}")), |bch| {
        bch.iter(|| {
            let mut gr = Graph::new();
            let q = gr.param(x.clone());
            let a = gr.attention(q, q, q, &segs, 2).unwrap();
            let s = gr.sum_all(a).unwrap();
            gr.backward(s).unwrap();
            black_box(gr.grad(q).unwrap().map(|v| v[0]))
        })
    });
    g.finish();
}

fn runs(c: &mut Criterion) {
    let train = data(256);
    let evals: Vec<(&str, &[Example])> = vec![("id", &train[..64])];
    let base = RunSpec {
        name: "b".into(),
        encoder: EncoderConfig {
            d_model: 8,
            n_layers: 2,
            d_ff: 16,
            vocab_size: 46,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 32,
            branches: vec!["shuffle".parse().unwrap()],
            eval_views: vec!["shuffle".parse().unwrap()],
            ..Default::default()
        },
    };
    let specs: Vec<RunSpec> = (0..4)
        .map(|s| {
            let mut r = base.clone();
            r.train.seed = s;
            r
        })
        .collect();
    let mut g = c.benchmark_group("independent_runs_4");
    g.sample_size(10);
    g.bench_function(mode(), |b| b.iter(|| black_box(run_many(&specs, &train, &evals).unwrap())));
    g.bench_function("seq", |b| {
        b.iter(|| black_box(specs.iter().map(|s| run_one(s, &train, &evals).unwrap()).collect::<Vec<_>>()))
    });
    g.finish();
}

criterion_group!(benches, predict, attention, runs);
criterion_main!(benches);
