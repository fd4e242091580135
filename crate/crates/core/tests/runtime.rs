use detcloud_core::kernel::ScheduleOptions;
use detcloud_core::runtime::programs::{self, Workload};

fn run_checked(w: &Workload, workers: usize, seed: u64) {
    let t = w
        .guest()
        .run(&ScheduleOptions::new(workers, seed))
        .unwrap_or_else(|e| panic!("{}: {e}", w.name));
    if let Err(e) = w.check(t.root()) {
        for line in t.log.iter().take(60) {
            eprintln!("{line}");
        }
        panic!("{e}");
    }
}

fn each_schedule(w: &Workload) {
    for (workers, seed) in [(1, 0), (2, 7), (4, 99)] {
        run_checked(w, workers, seed);
    }
}

#[test]
fn halt_exits_zero() {
    each_schedule(&programs::halt());
}

#[test]
fn pipeline_stages_pass_files_through_wait() {
    each_schedule(&programs::pipeline(&[1, 2, 3, 40_000, 7]));
    each_schedule(&programs::pipeline(&[]));
}

#[test]
fn append_log_keeps_parent_records_first_then_writers_in_order() {
    each_schedule(&programs::append_log(3, 5));
}

#[test]
fn swap_always_swaps() {
    each_schedule(&programs::swap());
}

#[test]
fn reference_clock_reads_zero() {
    each_schedule(&programs::ref_clock(20_000, 3_000));
}

#[test]
fn brute_force_finds_smallest_preimage() {
    each_schedule(&programs::brute_force(1234, 3_000, 3));
    each_schedule(&programs::brute_force(9_999, 2_000, 2));
}

#[test]
fn matmult_matches_sequential_product() {
    each_schedule(&programs::matmult(9, 4, 1));
    each_schedule(&programs::matmult(1, 1, 2));
}

#[test]
fn qsort_matches_std_sort() {
    each_schedule(&programs::qsort(&programs::random_words(2_000, 3), 3));
    each_schedule(&programs::qsort(&[5, 5, 5, 1, 0, 9], 2));
    each_schedule(&programs::qsort(&[], 1));
}

#[test]
fn exec_replaces_image_and_keeps_files() {
    each_schedule(&programs::exec_echo(b"argument block"));
}

use detcloud_core::fs::{FileImage, FsError};
use detcloud_core::kernel::Terminal;
use detcloud_core::runtime::{self, files_of, link, META_CONFLICTS, MAX_SLOTS};
use detcloud_core::vm::StopReason;
use rand::SeedableRng;

fn run_source(src: &str, files: &FileImage, fuel: u64, workers: usize, seed: u64) -> Terminal {
    let program = link(src).unwrap();
    runtime::boot(program, files, fuel)
        .run(&ScheduleOptions::new(workers, seed))
        .unwrap()
}

#[test]
fn rfork_runs_out_of_slots_at_the_cap() {
    // Forks children that exit at once, never waiting, until rfork fails;
    // the exit code is the number of successful forks.
    let src = r#"
.equ COUNT, 0x00800000
main:
    li r0, 1000
    call rfork
    beq r0, zero, child
    li r1, 0xffffffff
    beq r0, r1, full
    li r1, COUNT
    load r2, [r1]
    add r2, 1
    store r2, [r1]
    b main
full:
    li r1, COUNT
    load r0, [r1]
    b exit
child:
    li r0, 0
    b exit
"#;
    for workers in [1, 3] {
        let t = run_source(src, &FileImage::new(), 10_000_000, workers, 5);
        assert_eq!(t.root().status, Some(StopReason::Halt(MAX_SLOTS)));
    }
}

#[test]
fn tjoin_reports_conflicting_words_and_their_addresses() {
    // Both threads write different values to the same word; the second
    // join sees one conflicting word at that address and keeps the value
    // already merged from the first.
    let src = r#"
.equ SHARED, 0x00400000
.equ VARS, 0x00800000
main:
    li r0, writer
    li r1, 11
    li r2, 10000
    call tfork
    li r1, VARS
    store r0, [r1]
    li r0, writer
    li r1, 22
    li r2, 10000
    call tfork
    li r1, VARS
    store r0, [r1+4]
    load r0, [r1]
    call tjoin
    li r1, VARS
    store r2, [r1+8]
    load r0, [r1+4]
    call tjoin
    li r1, VARS
    store r2, [r1+12]
    li r2, SHARED
    load r2, [r2]
    store r2, [r1+16]
    li r0, out_name
    li r2, 20
    call write_file
    li r0, 0
    b exit
writer:
    li r1, SHARED
    store r0, [r1]
    li r0, 0
    ret
out_name: .asciz "out"
"#;
    for (workers, seed) in [(1, 0), (2, 1), (4, 2)] {
        let t = run_source(src, &FileImage::new(), 1_000_000, workers, seed);
        let root = t.root();
        assert_eq!(root.status, Some(StopReason::Halt(0)));
        let out = files_of(root).unwrap().get("out").unwrap().data.clone();
        let w: Vec<u32> = out.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(w[2..], [0, 1, 11]);
        assert_eq!(root.space.read_u32(META_CONFLICTS), 0x0040_0000);
    }
}

#[test]
fn children_rewriting_one_file_conflict_and_flag_it() {
    // Two forked children truncate-and-write "f" with different content.
    // The first wait takes child one's content, the second flags "f".
    let src = r#"
.equ VARS, 0x00800000
main:
    li r0, 100000
    call rfork
    beq r0, zero, one
    li r1, VARS
    store r0, [r1]
    li r0, 100000
    call rfork
    beq r0, zero, two
    li r1, VARS
    store r0, [r1+4]
    load r0, [r1]
    call wait
    li r1, VARS
    store r2, [r1+8]
    load r0, [r1+4]
    call wait
    li r1, VARS
    load r0, [r1+8]
    shl r2, 4
    add r0, r2
    b exit
one:
    li r0, f_name
    li r1, one_text
    li r2, 3
    call write_file
    li r0, 0
    b exit
two:
    li r0, f_name
    li r1, two_text
    li r2, 3
    call write_file
    li r0, 0
    b exit
f_name: .asciz "f"
one_text: .asciz "one"
two_text: .asciz "two"
"#;
    let files = FileImage::from_files([("f", &b"base"[..])]).unwrap();
    for (workers, seed) in [(1, 0), (3, 4)] {
        let t = run_source(src, &files, 1_000_000, workers, seed);
        let root = t.root();
        // First wait: 0 conflicts; second: 1 conflict (in the high nibble).
        assert_eq!(root.status, Some(StopReason::Halt(0x10)));
        let img = files_of(root).unwrap();
        let f = img.get("f").unwrap();
        assert_eq!(f.data, b"one");
        assert!(f.meta.conflict());
    }
}

#[test]
fn failed_exec_returns_to_the_caller() {
    let mut w = programs::exec_echo(b"x");
    w.files = FileImage::from_files([("prog", &b"not a program"[..])]).unwrap();
    let t = w.guest().run(&ScheduleOptions::new(1, 0)).unwrap();
    assert_eq!(t.root().status, Some(StopReason::Halt(100)));
    let img = files_of(t.root()).unwrap();
    assert_eq!(img.get("before").unwrap().data, b"before");
    assert!(img.get("echo").is_none());
    assert_eq!(FsError::NotExecutable.errno(), 8);
}

#[test]
fn catalog_results_do_not_depend_on_the_schedule() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    for round in 0..3 {
        for w in programs::catalog(&mut rng) {
            let hashes: Vec<[u8; 32]> = [(1, 0), (2, round), (4, 17 + round), (8, 3)]
                .into_iter()
                .map(|(workers, seed)| {
                    let mut opts = ScheduleOptions::new(workers, seed);
                    opts.slice = (50, 3_000);
                    let t = w.guest().run(&opts).unwrap();
                    w.check(t.root()).unwrap();
                    t.state_hash()
                })
                .collect();
            assert!(hashes.windows(2).all(|p| p[0] == p[1]), "{}", w.name);
        }
    }
}
