use gem_core::audit::{audit, audit_batch};
use gem_core::engine::journal::replay;
use gem_core::operators::detect_duplicates;
use gem_core::par::Parallelism;
use gem_core::workload::{self, GenConfig};
use gem_core::{Beta, Journal, Query};
use proptest::prelude::*;

fn jobs(seeds: std::ops::Range<u64>, cfg: &GenConfig) -> Vec<(Journal, Vec<Query>)> {
    seeds
        .map(|seed| {
            let w = workload::generate(seed, cfg);
            let (engine, _) = workload::run_gem(workload::generated_settings(cfg), &w).unwrap();
            (engine.into_journal(), w.probes())
        })
        .collect()
}

#[test]
fn parallel_and_sequential_audits_agree() {
    let jobs = jobs(1000..1012, &GenConfig::default());
    let seq = audit_batch(Parallelism::Sequential, &jobs);
    let par = audit_batch(Parallelism::Parallel, &jobs);
    for (a, b) in seq.into_iter().zip(par) {
        assert_eq!(a.unwrap(), b.unwrap());
    }
}

#[test]
fn duplicate_scan_is_mode_independent() {
    let w = workload::ingest_stream(11, 300);
    let params = gem_core::EngineParams { beta: Beta::Constant(400), ..Default::default() };
    let (engine, _) = workload::run_gem(gem_core::Settings::with_defaults(params.clone()), &w).unwrap();
    let s = engine.state();
    assert_eq!(detect_duplicates(Parallelism::Sequential, s, &params), detect_duplicates(Parallelism::Parallel, s, &params));
}

#[test]
fn tight_bound_stays_clean() {
    // a bound small enough that most writes have to make room first
    let cfg = GenConfig { events: 150, topics: 14, beta: Beta::Constant(6) };
    for (j, probes) in jobs(0..8, &cfg) {
        let r = audit(&j, &probes).unwrap();
        assert!(r.pass(), "{}", r.render());
    }
}

#[test]
fn affine_bound_stays_clean() {
    let cfg = GenConfig { events: 150, topics: 12, beta: Beta::Affine { base: 4, slope: 0.1 } };
    for (j, probes) in jobs(50..56, &cfg) {
        let r = audit(&j, &probes).unwrap();
        assert!(r.pass(), "{}", r.render());
    }
}

#[test]
fn tampered_journal_is_rejected() {
    let (mut j, _) = jobs(3..4, &GenConfig::default()).pop().unwrap();
    let i = j.entries.iter().position(|e| !e.record.deltas.is_empty()).unwrap();
    j.entries[i].record.deltas.pop();
    assert!(replay(&j).is_err());
    assert!(audit(&j, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_seed_replays_to_the_live_digest(seed in any::<u64>(), events in 20usize..80) {
        let cfg = GenConfig { events, ..Default::default() };
        let w = workload::generate(seed, &cfg);
        let (engine, _) = workload::run_gem(workload::generated_settings(&cfg), &w).unwrap();
        let back = Journal::from_bytes(&engine.journal().to_bytes()).unwrap();
        prop_assert_eq!(replay(&back).unwrap().digest(), engine.state().digest());
        let r = audit(&back, &w.probes()).unwrap();
        prop_assert!(r.pass(), "{}", r.render());
    }
}
