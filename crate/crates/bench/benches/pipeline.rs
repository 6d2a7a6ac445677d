use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mergelink::corpus::sample_calls;
use mergelink::{
    analyze_module, combine, icf, link, pipeline_read_artifacts, pipeline_two_round, pipeline_write_artifacts, run,
    CostConfig, IcfMode, Limits, PipelineConfig,
};
use mergelink_bench::workload;

const SCALES: [(usize, usize); 3] = [(2, 16), (4, 32), (8, 48)];

fn phases(c: &mut Criterion) {
    let mut group = c.benchmark_group("phases");
    for (modules, per) in SCALES {
        let p = workload(modules, per, 7);
        let id = format!("{modules}x{per}");
        let sums: Vec<_> = p.modules.iter().flat_map(analyze_module).collect();
        group.bench_with_input(BenchmarkId::new("analyze", &id), &p, |b, p| {
            b.iter(|| p.modules.iter().map(|m| analyze_module(black_box(m)).len()).sum::<usize>())
        });
        group.bench_with_input(BenchmarkId::new("combine", &id), &sums, |b, s| {
            b.iter(|| combine(black_box(s), CostConfig::default()).unwrap())
        });
        let image = link(&p.modules).unwrap();
        group.bench_with_input(BenchmarkId::new("icf", &id), &image, |b, img| {
            b.iter(|| icf(black_box(img), IcfMode::All))
        });
    }
    group.finish();
}

fn pipelines(c: &mut Criterion) {
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(20);
    for (modules, per) in SCALES {
        let p = workload(modules, per, 7);
        let id = format!("{modules}x{per}");
        for (name, single) in [("two-round", false), ("two-round-serial", true)] {
            let cfg = PipelineConfig { single_threaded: single, ..PipelineConfig::default() };
            group.bench_with_input(BenchmarkId::new(name, &id), &p, |b, p| {
                b.iter(|| pipeline_two_round(p, &cfg).unwrap())
            });
        }
        let cfg = PipelineConfig::default();
        let bundle = pipeline_write_artifacts(&p, &cfg).unwrap();
        group.bench_with_input(BenchmarkId::new("read-artifacts", &id), &p, |b, p| {
            b.iter(|| pipeline_read_artifacts(p, &cfg, Some(&bundle)).unwrap())
        });
    }
    group.finish();
}

fn interpreter(c: &mut Criterion) {
    let p = workload(4, 32, 7);
    let out = pipeline_two_round(&p, &PipelineConfig::default()).unwrap();
    let calls = sample_calls(&p, 7, 50);
    c.bench_function("interp/50-calls", |b| {
        b.iter(|| {
            for (entry, args) in &calls {
                black_box(run(&out.image, entry, args, Limits::default()).unwrap());
            }
        })
    });
}

criterion_group!(benches, phases, pipelines, interpreter);
criterion_main!(benches);
