use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tsgsim_bench::{datagen, map_bigs, space_pair};
use tsgsim_core::workload::DatagenMode;
use tsgsim_core::VirtAddr;

fn graft(c: &mut Criterion) {
    let mut g = c.benchmark_group("graft");
    for n in [16u64, 512, 4096] {
        g.bench_with_input(BenchmarkId::new("graft_then_map", n), &n, |b, &n| {
            b.iter(|| {
                let (mut m, hi, lo) = space_pair();
                map_bigs(&mut m, hi, 1);
                m.graft(hi, lo).unwrap();
                map_bigs(&mut m, hi, n);
                black_box(m.space(lo).unwrap().counters())
            })
        });
    }
    g.finish();
}

fn translate(c: &mut Criterion) {
    let (mut m, hi, lo) = space_pair();
    map_bigs(&mut m, hi, 256);
    m.graft(hi, lo).unwrap();
    let base = m.high_range().base();
    c.bench_function("translate_grafted", |b| {
        let mut i = 0u64;
        b.iter(|| {
            i = (i + 1) % 256;
            black_box(m.translate(lo, VirtAddr(base + (i << 21))).unwrap())
        })
    });
}

fn engine(c: &mut Criterion) {
    let mut g = c.benchmark_group("datagen");
    g.sample_size(20);
    for mode in [DatagenMode::Sequential, DatagenMode::Pipelined] {
        g.bench_function(format!("{mode:?}_100x256"), |b| b.iter(|| black_box(datagen(100, 256, mode))));
    }
    g.finish();
}

criterion_group!(benches, graft, translate, engine);
criterion_main!(benches);
