use std::sync::Arc;

use detcloud_core::gateway::{
    CommitOutcome, FollowupOutcome, Gateway, GatewayConfig, GatewayError, JobSpec, LogicalClock,
    ResultRecord, Store,
};
use detcloud_core::runtime::{link, programs};
use detcloud_core::vm::{GuestProgram, StopReason};

/// Copies the file named by input "src" to the file named by input "dst".
/// A missing source copies as empty.
const COPY: &str = r#"
.equ SRC, 0x00800000
.equ DST, 0x00800100
.equ BUF, 0x00900000

main:
    li r0, src_name
    li r1, SRC
    li r2, 63
    call read_file
    li r0, dst_name
    li r1, DST
    li r2, 63
    call read_file
    li r0, SRC
    li r1, BUF
    li r2, 0x10000
    call read_file
    li r1, 0x80000000
    bltu r0, r1, have
    li r0, 0
have:
    mov r2, r0
    li r0, DST
    li r1, BUF
    call write_file
    li r0, 0
    b exit

src_name: .asciz "src"
dst_name: .asciz "dst"
"#;

const Q: u64 = 1000;

fn gateway(workers: usize) -> (Gateway, Arc<LogicalClock>) {
    let clock = Arc::new(LogicalClock::new(0));
    let gw = Gateway::new(
        GatewayConfig {
            quantum_ms: Q,
            workers,
            ..GatewayConfig::default()
        },
        clock.clone(),
    );
    gw.add_customer("alice").unwrap();
    (gw, clock)
}

fn spec(program: GuestProgram, inputs: &[(&str, &[u8])]) -> JobSpec {
    JobSpec {
        customer: "alice".into(),
        program,
        inputs: inputs.iter().map(|(n, d)| (n.to_string(), d.to_vec())).collect(),
        fuel: 2_000_000,
        followup_allowed: false,
    }
}

fn copy(src: &str, dst: &str, extra: &[(&str, &[u8])]) -> JobSpec {
    let mut inputs = vec![("src", src.as_bytes()), ("dst", dst.as_bytes())];
    inputs.extend_from_slice(extra);
    spec(link(COPY).unwrap(), &inputs)
}

fn latest(gw: &Gateway) -> (u64, Vec<u8>) {
    let s = gw.store();
    let v = s.latest_version("alice").unwrap();
    (v, s.snapshot("alice", v).unwrap().canonical_bytes())
}

#[test]
fn halt_job_commits_empty_diff_and_releases_next_quantum() {
    let (gw, clock) = gateway(2);
    clock.set(2500);
    let id = gw.submit(spec(programs::build("halt"), &[])).unwrap();
    assert_eq!(gw.run_ready().unwrap(), vec![id]);
    assert!(gw.release().is_empty());
    clock.set(2999);
    assert!(gw.release().is_empty());
    clock.set(3000);
    let out = gw.release();
    assert_eq!(out.len(), 1);
    let r = &out[0];
    assert_eq!(r.status, StopReason::Halt(0));
    assert!(r.diff.is_empty());
    assert_eq!(r.commit, CommitOutcome::Committed(1));
    assert_eq!(r.release_time, 3000);
}

#[test]
fn inputs_and_timestamp_are_visible() {
    let (gw, clock) = gateway(2);
    clock.set(3456);
    let id = gw.submit(copy("query", "seen", &[("query", b"what time")])).unwrap();
    let stamp = gw.submit(spec(programs::build("stamp"), &[])).unwrap();
    clock.set(3999);
    gw.run_ready().unwrap();
    clock.set(4000);
    let out = gw.release();
    assert_eq!(out.iter().map(|r| r.job).collect::<Vec<_>>(), vec![id, stamp]);
    assert_eq!(out[0].diff.changed["seen"].1, b"what time");
    assert!(!out[0].diff.changed.contains_key("query"));
    assert_eq!(out[1].diff.changed["stamp"].1, b"3000");
    assert_eq!(out[1].commit, CommitOutcome::AbortedStaleBase);
}

fn workload_spec(w: programs::Workload) -> JobSpec {
    JobSpec {
        customer: "alice".into(),
        inputs: w.files.files().into_iter().map(|(n, e)| (n.to_string(), e.data.clone())).collect(),
        program: w.program,
        fuel: w.fuel,
        followup_allowed: false,
    }
}

#[test]
fn same_job_twice_on_one_base_gives_identical_outputs() {
    for w in [programs::append_log(3, 4), programs::pipeline(&[3, 1, 4, 1, 5])] {
        let (gw, _) = gateway(4);
        gw.submit(workload_spec(w.clone())).unwrap();
        gw.submit(workload_spec(w)).unwrap();
        let jobs = gw.take_ready();
        assert_eq!(jobs[0].base_version, jobs[1].base_version);
        let a = gw.prepare(jobs[0].clone()).unwrap().run().unwrap();
        let b = gw.prepare(jobs[1].clone()).unwrap().run().unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.diff, b.diff);
        assert_eq!(a.output_hash, b.output_hash);
        assert!(!a.diff.is_empty());
    }
}

#[test]
fn worker_count_changes_nothing_but_release_time() {
    let run = |workers: usize, start: u64| {
        let (gw, clock) = gateway(workers);
        clock.set(start);
        gw.submit(workload_spec(programs::matmult(8, 4, 3))).unwrap();
        gw.run_ready().unwrap();
        clock.advance(10 * Q);
        let r = gw.release().pop().unwrap();
        ResultRecord::from(&r)
    };
    let one = run(1, 0);
    let eight = run(8, 0);
    assert_eq!(one.to_text(), eight.to_text());
    let later = run(8, 2 * Q);
    assert_eq!(one.content_text(), later.content_text());
}

#[test]
fn first_committer_wins_in_either_order() {
    let serial = |first: usize| {
        let (gw, _) = gateway(2);
        gw.submit(copy("in-a", "out-a", &[("in-a", b"A")])).unwrap();
        gw.submit(copy("in-b", "out-b", &[("in-b", b"B")])).unwrap();
        let ran: Vec<_> = gw
            .take_ready()
            .into_iter()
            .map(|j| gw.prepare(j).unwrap().run().unwrap())
            .collect();
        let (x, y) = (ran[first].clone(), ran[1 - first].clone());
        let rx = gw.commit(x).unwrap();
        let ry = gw.commit(y).unwrap();
        assert_eq!(rx.commit, CommitOutcome::Committed(1));
        assert_eq!(ry.commit, CommitOutcome::AbortedStaleBase);
        (rx.job, latest(&gw))
    };
    // The legal serializations: only the winner's diff on the base.
    let legal = |file: &str, data: &[u8]| {
        let mut s = Store::new();
        s.add_customer("alice").unwrap();
        let mut d = detcloud_core::gateway::FileDiff::default();
        d.changed.insert(file.into(), (0, data.to_vec()));
        s.commit("alice", 0, None, &d).unwrap();
        (1, s.snapshot("alice", 1).unwrap().canonical_bytes())
    };
    assert_eq!(serial(0), (1, legal("out-a", b"A")));
    assert_eq!(serial(1), (2, legal("out-b", b"B")));
}

#[test]
fn read_only_job_still_advances_the_version() {
    let (gw, _) = gateway(1);
    gw.submit(copy("x", "y", &[])).unwrap();
    gw.run_ready().unwrap();
    gw.submit(spec(programs::build("halt"), &[])).unwrap();
    gw.run_ready().unwrap();
    let store = gw.store();
    assert_eq!(store.latest_version("alice").unwrap(), 2);
    assert!(store.commits("alice").unwrap()[1].diff.is_empty());
}

#[test]
fn commits_during_a_run_do_not_reach_it() {
    let (gw, _) = gateway(2);
    gw.submit(copy("data", "out", &[("data", b"v0")])).unwrap();
    gw.run_ready().unwrap();
    gw.submit(copy("out", "seen", &[])).unwrap();
    let job = gw.take_ready().pop().unwrap();
    let reference = gw.prepare(job.clone()).unwrap().run().unwrap();
    let prepared = gw.prepare(job).unwrap();
    let during = std::thread::scope(|s| {
        let h = s.spawn(|| prepared.run().unwrap());
        for i in 0..20u8 {
            gw.submit(copy("data", "out", &[("data", &[b'w', i])])).unwrap();
            gw.run_ready().unwrap();
        }
        h.join().unwrap()
    });
    assert_eq!(during.diff, reference.diff);
    assert_eq!(during.output_hash, reference.output_hash);
    assert_eq!(during.diff.changed["seen"].1, b"v0");
    assert_eq!(gw.commit(during).unwrap().commit, CommitOutcome::AbortedStaleBase);
}

#[test]
fn followup_is_scheduled_delay_quanta_after_release() {
    let (gw, clock) = gateway(2);
    clock.set(3456);
    let mut s = spec(
        programs::build("stamp"),
        &[("followup-request", b"delay: 3\nprogram: self\n")],
    );
    s.followup_allowed = true;
    let id = gw.submit(s).unwrap();
    gw.run_ready().unwrap();
    clock.set(4000);
    let first = gw.release().pop().unwrap();
    assert_eq!(first.job, id);
    assert_eq!(first.release_time, 4000);
    let FollowupOutcome::Submitted(next) = first.followup else {
        panic!("{:?}", first.followup)
    };
    assert_eq!(gw.next_event(), Some(7000));
    clock.set(6999);
    assert!(gw.run_ready().unwrap().is_empty());
    clock.set(7000);
    assert_eq!(gw.run_ready().unwrap(), vec![next]);
    clock.set(8000);
    let second = gw.release().pop().unwrap();
    assert_eq!(second.diff.changed["stamp"].1, b"7000");
    assert_eq!(second.commit, CommitOutcome::Committed(2));
    assert_eq!(second.followup, FollowupOutcome::None);
}

#[test]
fn followups_need_permission() {
    let (gw, _) = gateway(1);
    gw.submit(spec(programs::build("stamp"), &[("followup-request", b"delay: 1\n")])).unwrap();
    gw.run_ready().unwrap();
    let r = gw.store();
    assert_eq!(r.latest_version("alice").unwrap(), 1);
    assert_eq!(gw.pending(), 0);
}

#[test]
fn results_within_a_quantum_release_together_in_id_order() {
    let (gw, clock) = gateway(1);
    clock.set(3050);
    let a = gw.submit(spec(programs::build("halt"), &[])).unwrap();
    let b = gw.submit(spec(programs::build("halt"), &[])).unwrap();
    let jobs = gw.take_ready();
    let ex: Vec<_> = jobs.into_iter().map(|j| gw.prepare(j).unwrap().run().unwrap()).collect();
    clock.set(3900);
    gw.commit(ex[1].clone()).unwrap();
    clock.set(3100);
    gw.commit(ex[0].clone()).unwrap();
    clock.set(4000);
    let out = gw.release();
    assert_eq!(out.iter().map(|r| (r.job, r.release_time)).collect::<Vec<_>>(), vec![(a, 4000), (b, 4000)]);
}

#[test]
fn fuelout_is_discarded_with_status_only() {
    let (gw, clock) = gateway(2);
    let mut s = copy("a", "b", &[("a", b"data")]);
    s.fuel = 40;
    gw.submit(s).unwrap();
    gw.run_ready().unwrap();
    clock.set(Q);
    let r = gw.release().pop().unwrap();
    assert_eq!(r.status, StopReason::FuelOut);
    assert_eq!(r.commit, CommitOutcome::Discarded);
    assert!(r.diff.is_empty());
    assert_eq!(r.fuel_consumed, 40);
    assert_eq!(gw.store().latest_version("alice").unwrap(), 0);
}

#[test]
fn submit_rejects_bad_jobs() {
    let clock = Arc::new(LogicalClock::new(0));
    let gw = Gateway::new(
        GatewayConfig {
            max_program_bytes: 64,
            ..GatewayConfig::default()
        },
        clock,
    );
    gw.add_customer("alice").unwrap();
    let mut s = spec(programs::build("halt"), &[]);
    assert!(matches!(gw.submit(s.clone()), Err(GatewayError::ProgramTooLarge { .. })));
    s.customer = "mallory".into();
    assert!(matches!(gw.submit(s), Err(GatewayError::UnknownCustomer(_))));
}

#[test]
fn store_log_replays_to_the_final_state() {
    let (gw, _) = gateway(2);
    for i in 0..5u8 {
        gw.submit(copy("in", &format!("out{}", i % 3), &[("in", &[i; 3])])).unwrap();
        gw.run_ready().unwrap();
    }
    let store = gw.store();
    let (v, bytes) = latest(&gw);
    assert_eq!(v, 5);
    assert_eq!(store.replay("alice").unwrap().canonical_bytes(), bytes);
    let back = Store::from_text(&store.to_text()).unwrap();
    assert_eq!(back.snapshot("alice", v).unwrap().canonical_bytes(), bytes);
}
