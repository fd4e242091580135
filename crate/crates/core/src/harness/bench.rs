use std::time::{Duration, Instant};

use crate::kernel::ScheduleOptions;
use crate::runtime::{files_of, output_hash, programs, programs::Workload};

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub workers: usize,
    /// Best of the repetitions.
    pub wall: Duration,
    pub hash: [u8; 32],
    pub check: Result<(), String>,
}

/// Shipped parallel workloads at benchmark sizes. The guest's own thread
/// count is fixed, so the output cannot depend on the worker count.
pub fn bench_workload(name: &str) -> Option<Workload> {
    Some(match name {
        "bruteforce" => programs::brute_force(0x00ab_cdef, 400_000, 8),
        "matmult" => programs::matmult(128, 4, 7),
        "qsort" => programs::qsort(&programs::random_words(100_000, 11), 3),
        _ => return None,
    })
}

/// Runs `workload` once per worker count (best of `reps`) and reports the
/// wall time and output hash of each.
pub fn bench_scaling(workload: &Workload, workers: &[usize], reps: usize, seed: u64) -> Vec<BenchRow> {
    let guest = workload.guest();
    workers
        .iter()
        .map(|&w| {
            let mut best = Duration::MAX;
            let mut outcome = None;
            for _ in 0..reps.max(1) {
                let opts = ScheduleOptions::new(w, seed);
                let start = Instant::now();
                let term = guest.run(&opts);
                best = best.min(start.elapsed());
                outcome = Some(term);
            }
            let (hash, check) = match outcome.expect("at least one repetition") {
                Ok(term) => {
                    let root = term.root();
                    let hash = files_of(root)
                        .map(|f| output_hash(&root.status.expect("stopped"), &f, &term.log))
                        .unwrap_or([0; 32]);
                    (hash, workload.check(root))
                }
                Err(e) => ([0; 32], Err(e.to_string())),
            };
            BenchRow {
                workers: w,
                wall: best,
                hash,
                check,
            }
        })
        .collect()
}
