use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use hisekt_core::synthetic::irt_responses;
use hisekt_core::{auc, irt, mrhin, pathscore, pipeline, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn irt_fit(c: &mut Criterion) {
    let (d, _) = irt_responses(200, 50, 1).unwrap();
    c.bench_function("irt_fit_200x50", |b| b.iter(|| irt::fit(black_box(&d))));
}

fn paths(c: &mut Criterion) {
    let (d, _) = irt_responses(60, 30, 2).unwrap();
    let g = mrhin::build(&d, &irt::fit(&d));
    let cfg = RunConfig {
        n_walks: 10,
        walk_len: 12,
        ..RunConfig::default()
    };
    c.bench_function("sample_paths_60x30", |b| {
        b.iter(|| pipeline::sample_paths(black_box(&d), &g, &cfg, 7))
    });
    let instances: Vec<_> = pipeline::sample_paths(&d, &g, &cfg, 7)
        .instances(&g)
        .unwrap()
        .into_values()
        .flatten()
        .collect();
    c.bench_function("score_paths_60x30", |b| {
        b.iter(|| pathscore::score_all(&g, black_box(&instances)))
    });
}

fn auc_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<bool> = (0..10_000).map(|_| rng.gen()).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| (rng.gen::<f64>() * 50.0).round() / 50.0).collect();
    c.bench_function("auc_10k", |b| {
        b.iter_batched(|| scores.clone(), |s| auc(&labels, &s), BatchSize::SmallInput)
    });
}

criterion_group!(benches, irt_fit, paths, auc_bench);
criterion_main!(benches);
