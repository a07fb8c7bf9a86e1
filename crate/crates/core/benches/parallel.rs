//! Sequential against rayon-backed execution for each batch path. Journal
//! audits fan out per journal; the topic scans fan out per topic.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gem_core::audit;
use gem_core::embed::topic_scores;
use gem_core::operators::detect_duplicates;
use gem_core::par::Parallelism;
use gem_core::workload::{self, GenConfig};
use gem_core::engine::Journal;
use gem_core::{EngineParams, Query, Settings};

const MODES: [Parallelism; 2] = [Parallelism::Sequential, Parallelism::Parallel];

fn audit_jobs(n: u64) -> Vec<(Journal, Vec<Query>)> {
    let cfg = GenConfig::default();
    (0..n)
        .map(|seed| {
            let w = workload::generate(seed, &cfg);
            let (engine, _) = workload::run_gem(workload::generated_settings(&cfg), &w).expect("engine");
            (engine.into_journal(), w.probes())
        })
        .collect()
}

fn bench_audit(c: &mut Criterion) {
    let jobs = audit_jobs(16);
    let mut g = c.benchmark_group("audit_batch");
    g.sample_size(10);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &jobs, |b, jobs| {
            b.iter(|| audit::audit_batch(mode, jobs))
        });
    }
    g.finish();
}

fn bench_state_scans(c: &mut Criterion) {
    // a large store, most of it attenuated, with many overlapping titles
    let w = workload::ingest_stream(3, 2000);
    let params = EngineParams { beta: gem_core::Beta::Constant(2000), ..Default::default() };
    let (engine, _) = workload::run_gem(Settings::with_defaults(params.clone()), &w).expect("engine");
    let state = engine.state().clone();

    let mut g = c.benchmark_group("detect_duplicates");
    for mode in MODES {
        g.bench_function(format!("{mode:?}"), |b| b.iter(|| detect_duplicates(mode, &state, &params)));
    }
    g.finish();

    let mut g = c.benchmark_group("router_scores");
    let text = "Item 42 Website Redesign | Deadline: June 30";
    for mode in MODES {
        g.bench_function(format!("{mode:?}"), |b| b.iter(|| topic_scores(mode, &state, text)));
    }
    g.finish();
}

criterion_group!(benches, bench_audit, bench_state_scans);
criterion_main!(benches);
