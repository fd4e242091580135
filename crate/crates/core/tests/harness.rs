use std::time::Duration;

use detcloud_core::harness::{
    bench_scaling, detect_mutation, fuzz, parse_plan, probe_timing, seeds, workload, FuzzPlan,
    HarnessMutation, ProbeConfig, STANDARD,
};
use detcloud_core::kernel::Mutation;
use detcloud_core::runtime::programs;

#[test]
fn standard_workloads_pass_a_short_fuzz() {
    for name in STANDARD {
        let plan = FuzzPlan::new(workload(name).unwrap(), seeds(3, 3), vec![1, 4]);
        let r = fuzz(&plan);
        assert!(r.passed(), "{}", r.summary());
        assert!(r.oracle_failure.is_none(), "{}", r.summary());
        assert_eq!(r.unique_hashes, 1);
    }
}

#[test]
fn live_child_merge_shows_up_as_a_divergence() {
    let mut plan = FuzzPlan::new(workload("refclock").unwrap(), seeds(5, 10), vec![1, 2, 4, 8]);
    plan.mutation = Some(Mutation::LiveChildMerge);
    let r = fuzz(&plan);
    let d = r.divergence.expect("mutation must diverge");
    assert!(d.line >= 1);
    assert_ne!(d.expected, d.found);
}

#[test]
fn every_documented_mutation_is_detected() {
    for m in HarnessMutation::ALL {
        let r = detect_mutation(m, 9);
        println!("{}: {}", m.name(), r.evidence);
        assert!(r.detected, "{}: {}", m.name(), r.evidence);
    }
}

#[test]
fn fuzz_reports_are_reproducible_from_the_master_seed() {
    let plans = parse_plan("workload: swap\nworkload: applog\nseeds: 4\nworkers: 1,2\n", 42).unwrap();
    let a: Vec<_> = plans.iter().map(|p| fuzz(p).reference).collect();
    let plans = parse_plan("workload: swap\nworkload: applog\nseeds: 4\nworkers: 1,2\n", 42).unwrap();
    let b: Vec<_> = plans.iter().map(|p| fuzz(p).reference).collect();
    assert_eq!(a, b);
}

#[test]
fn probe_sees_one_output_under_stalls() {
    let r = probe_timing(&ProbeConfig {
        runs: 8,
        max_stall: Duration::from_millis(2),
        ..ProbeConfig::default()
    });
    assert!(r.passed(), "{}", r.summary());
    assert_eq!(r.runs[0].now.as_deref(), Some("5000"));
}

#[test]
fn bench_rows_agree_on_the_output() {
    let w = programs::brute_force(77, 3_000, 4);
    let rows = bench_scaling(&w, &[1, 2], 1, 0);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].hash, rows[1].hash);
    assert!(rows.iter().all(|r| r.check.is_ok()));
}

