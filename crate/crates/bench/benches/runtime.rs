//! Prefill, decode, and generation benchmarks: the pruned pipeline against
//! the plain one, and speculative decoding against straight greedy decoding
//! of the same pruned target.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use twig_bench::{bench_layout, bench_prompt, bench_prune, bench_twig};
use twig_core::{
    decode_step, fastv_prefill, greedy_generate, prefill, ssd_generate, target_greedy_generate,
    SsdConfig,
};

fn prefill_benches(c: &mut Criterion) {
    let tm = bench_twig();
    let layout = bench_layout();
    let prompt = bench_prompt(&tm);
    let prune = bench_prune(&tm);

    let mut group = c.benchmark_group("prefill");
    group.bench_function("full", |b| {
        b.iter(|| prefill(tm.base(), black_box(&prompt), &[]).unwrap())
    });
    group.bench_function("pruned", |b| {
        b.iter(|| {
            let fastv = twig_core::PruneConfig { selection_depth: prune.prune_layer, ..prune };
            fastv_prefill(tm.base(), black_box(&prompt), &layout, &fastv).unwrap()
        })
    });
    group.finish();
}

fn decode_benches(c: &mut Criterion) {
    let tm = bench_twig();
    let prompt = bench_prompt(&tm);
    let warm = prefill(tm.base(), &prompt, &[]).unwrap();

    c.bench_function("decode_step", |b| {
        b.iter_batched(
            || (warm.cache.clone(), warm.last_logits.argmax_last()),
            |(mut cache, token)| decode_step(tm.base(), &mut cache, black_box(token)).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn generation_benches(c: &mut Criterion) {
    let tm = bench_twig();
    let layout = bench_layout();
    let prompt = bench_prompt(&tm);
    let prune = bench_prune(&tm);
    let ssd_cfg = SsdConfig::default();
    let max_s = 32;

    let mut group = c.benchmark_group("generate");
    group.sample_size(20);
    group.bench_function("greedy_full_model", |b| {
        b.iter(|| greedy_generate(tm.base(), black_box(&prompt), &layout, max_s).unwrap())
    });
    group.bench_function("greedy_pruned_target", |b| {
        b.iter(|| {
            target_greedy_generate(&tm, black_box(&prompt), &layout, &prune, max_s).unwrap()
        })
    });
    group.bench_function("speculative", |b| {
        b.iter(|| {
            ssd_generate(&tm, black_box(&prompt), &layout, &prune, &ssd_cfg, max_s).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, prefill_benches, decode_benches, generation_benches);
criterion_main!(benches);
