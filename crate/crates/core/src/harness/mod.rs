//! Adversarial drivers: schedule fuzzing with first-divergence reports,
//! scaling measurements, the gateway timing probe and mutation checks.

mod bench;
mod mutation;
mod probe;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::kernel::{Guest, Mutation, ScheduleOptions, Terminal};
use crate::runtime::{files_of, output_hash, programs, programs::Workload};

pub use bench::{bench_scaling, bench_workload, BenchRow};
pub use mutation::{detect_mutation, HarnessMutation, MutationReport};
pub use probe::{probe_timing, ProbeConfig, ProbeRun, TimingProbeReport};

/// Schedule seeds for a run, drawn from `master`.
pub fn seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.gen()).collect()
}

/// One guest under test and the schedules to try it on.
#[derive(Debug, Clone)]
pub struct FuzzPlan {
    pub workload: Workload,
    pub seeds: Vec<u64>,
    pub workers: Vec<usize>,
    /// Inclusive bounds on preemption slices; short slices mean more
    /// interleavings.
    pub slice: (u64, u64),
    pub mutation: Option<Mutation>,
}

impl FuzzPlan {
    pub fn new(workload: Workload, seeds: Vec<u64>, workers: Vec<usize>) -> FuzzPlan {
        FuzzPlan {
            workload,
            seeds,
            workers,
            slice: (50, 5_000),
            mutation: None,
        }
    }

    fn guest(&self) -> Guest {
        let mut g = self.workload.guest();
        g.config.mutation = self.mutation;
        g
    }
}

/// What one schedule produced.
#[derive(Debug, Clone)]
pub struct Run {
    pub seed: u64,
    pub workers: usize,
    pub hash: [u8; 32],
    /// Event log followed by the root's status and files, one item per line.
    pub transcript: Vec<String>,
    /// The workload's oracle verdict.
    pub check: Result<(), String>,
}

fn transcript(term: &Terminal) -> Vec<String> {
    let root = term.root();
    let mut t = term.log.clone();
    t.push(format!("root status {:?}", root.status));
    match files_of(root) {
        Ok(files) => {
            for (name, e) in files.files() {
                t.push(format!(
                    "root file {name:?} flags={} len={} sha256={}",
                    e.meta.flags,
                    e.data.len(),
                    hex::encode(Sha256::digest(&e.data))
                ));
            }
        }
        Err(e) => t.push(format!("root files unreadable: {e}")),
    }
    t
}

pub fn run_once(workload: &Workload, guest: &Guest, slice: (u64, u64), seed: u64, workers: usize) -> Run {
    let opts = ScheduleOptions {
        slice,
        ..ScheduleOptions::new(workers, seed)
    };
    match guest.run(&opts) {
        Ok(term) => {
            let root = term.root();
            let status = root.status.expect("root stopped");
            let hash = match files_of(root) {
                Ok(files) => output_hash(&status, &files, &term.log),
                Err(_) => Sha256::digest(transcript(&term).join("\n")).into(),
            };
            Run {
                seed,
                workers,
                hash,
                transcript: transcript(&term),
                check: workload.check(root),
            }
        }
        Err(e) => {
            let transcript = vec![format!("kernel error: {e}")];
            Run {
                seed,
                workers,
                hash: Sha256::digest(&transcript[0]).into(),
                check: Err(transcript[0].clone()),
                transcript,
            }
        }
    }
}

/// The first line where two transcripts differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub seed: u64,
    pub workers: usize,
    /// One-based.
    pub line: usize,
    pub expected: String,
    pub found: String,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "seed {:#x} workers {} diverges at line {}\n  - {}\n  + {}",
            self.seed, self.workers, self.line, self.expected, self.found
        )
    }
}

fn first_difference(a: &[String], b: &[String]) -> (usize, String, String) {
    let end = "<end of transcript>".to_string();
    let i = a
        .iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .unwrap_or(a.len().min(b.len()));
    (
        i + 1,
        a.get(i).cloned().unwrap_or_else(|| end.clone()),
        b.get(i).cloned().unwrap_or(end),
    )
}

#[derive(Debug, Clone)]
pub struct FuzzReport {
    pub name: String,
    pub runs: usize,
    pub reference: [u8; 32],
    pub unique_hashes: usize,
    pub divergence: Option<Divergence>,
    /// The first run the workload's oracle rejected.
    pub oracle_failure: Option<String>,
}

impl FuzzReport {
    /// Every run matched the first.
    pub fn passed(&self) -> bool {
        self.divergence.is_none()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {} runs, {} unique output hash(es), reference {}",
            self.name,
            self.runs,
            self.unique_hashes,
            hex::encode(&self.reference[..8])
        );
        if let Some(d) = &self.divergence {
            let _ = write!(s, "\n  DIVERGED: {d}");
        }
        if let Some(e) = &self.oracle_failure {
            let _ = write!(s, "\n  ORACLE: {e}");
        }
        s
    }
}

/// Runs every (seed, worker count) combination and compares each output
/// hash with the first run's.
pub fn fuzz(plan: &FuzzPlan) -> FuzzReport {
    let guest = plan.guest();
    let mut reference: Option<Run> = None;
    let mut hashes = std::collections::BTreeSet::new();
    let (mut divergence, mut oracle_failure, mut runs) = (None, None, 0);
    for &seed in &plan.seeds {
        for &workers in &plan.workers {
            let run = run_once(&plan.workload, &guest, plan.slice, seed, workers);
            runs += 1;
            hashes.insert(run.hash);
            if oracle_failure.is_none() {
                if let Err(e) = &run.check {
                    oracle_failure = Some(format!("seed {seed:#x} workers {workers}: {e}"));
                }
            }
            match &reference {
                None => reference = Some(run),
                Some(r) if divergence.is_none() && r.hash != run.hash => {
                    let (line, expected, found) = first_difference(&r.transcript, &run.transcript);
                    divergence = Some(Divergence {
                        seed,
                        workers,
                        line,
                        expected,
                        found,
                    });
                }
                Some(_) => {}
            }
        }
    }
    FuzzReport {
        name: plan.workload.name.clone(),
        runs,
        reference: reference.map_or([0; 32], |r| r.hash),
        unique_hashes: hashes.len(),
        divergence,
        oracle_failure,
    }
}

pub const STANDARD: [&str; 9] = [
    "halt", "pipeline", "applog", "swap", "refclock", "bruteforce", "matmult", "qsort", "exec",
];

/// Shipped workloads at sizes suited to repeated fuzzing. Inputs are fixed
/// so that every run of a name is the same job.
pub fn workload(name: &str) -> Option<Workload> {
    Some(match name {
        "halt" => programs::halt(),
        "pipeline" => programs::pipeline(&programs::random_words(24, 1)),
        "applog" => programs::append_log(3, 6),
        "swap" => programs::swap(),
        "refclock" => programs::ref_clock(20_000, 3_000),
        "bruteforce" => programs::brute_force(1_234, 2_000, 4),
        "matmult" => programs::matmult(8, 4, 2),
        "qsort" => programs::qsort(&programs::random_words(400, 3), 2),
        "exec" => programs::exec_echo(b"exec'd"),
        _ => return None,
    })
}

/// Parses a plan file:
///
/// ```text
/// workload: refclock
/// workload: swap
/// seeds: 100
/// workers: 1,2,4,8
/// mutation: live-child-merge
/// ```
///
/// Each `workload:` line becomes one plan sharing the other settings.
/// `seeds` defaults to 100, `workers` to 1,2,4,8. Seeds are drawn from
/// `master_seed`.
pub fn parse_plan(text: &str, master_seed: u64) -> Result<Vec<FuzzPlan>, String> {
    let (mut names, mut n, mut workers, mut mutation) = (Vec::new(), 100usize, vec![1, 2, 4, 8], None);
    for l in text.lines().map(str::trim) {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let (k, v) = l
            .split_once(':')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| format!("expected `key: value`, got `{l}`"))?;
        match k {
            "workload" => names.push(v.to_string()),
            "seeds" => n = v.parse().map_err(|_| format!("bad seed count `{v}`"))?,
            "workers" => workers = parse_list(v)?,
            "mutation" => {
                mutation = match v {
                    "none" => None,
                    "live-child-merge" => Some(Mutation::LiveChildMerge),
                    "shared-fuel-counter" => Some(Mutation::SharedFuelCounter),
                    _ => return Err(format!("unknown kernel mutation `{v}`")),
                }
            }
            _ => return Err(format!("unknown field `{k}`")),
        }
    }
    if names.is_empty() {
        return Err("no workload".into());
    }
    let seeds = seeds(master_seed, n);
    names
        .iter()
        .map(|name| {
            let w = workload(name).ok_or_else(|| format!("unknown workload `{name}`"))?;
            let mut plan = FuzzPlan::new(w, seeds.clone(), workers.clone());
            plan.mutation = mutation;
            Ok(plan)
        })
        .collect()
}

/// Parses `1,2,4,8`.
pub fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("bad count `{x}`"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_follow_the_master_seed() {
        assert_eq!(seeds(7, 5), seeds(7, 5));
        assert_ne!(seeds(7, 5), seeds(8, 5));
    }

    #[test]
    fn every_standard_workload_exists() {
        for name in STANDARD {
            assert!(workload(name).is_some(), "{name}");
        }
    }

    #[test]
    fn plan_file() {
        let plans = parse_plan("workload: halt\nworkload: swap\nseeds: 3\nworkers: 1,4\n", 1).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[1].seeds.len(), 3);
        assert_eq!(plans[1].workers, vec![1, 4]);
        assert!(parse_plan("workload: nope\n", 1).is_err());
        assert!(parse_plan("seeds: 3\n", 1).is_err());
        assert!(parse_plan("workload: halt\nworkers: 0\n", 1).is_err());
    }

    #[test]
    fn first_difference_points_at_the_line() {
        let a: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
        let b: Vec<String> = ["x", "q"].map(String::from).to_vec();
        assert_eq!(first_difference(&a, &b), (2, "y".into(), "q".into()));
        assert_eq!(first_difference(&a[..2], &a).0, 3);
    }

    #[test]
    fn halt_passes_a_small_fuzz() {
        let plan = FuzzPlan::new(programs::halt(), seeds(1, 5), vec![1, 2]);
        let r = fuzz(&plan);
        assert!(r.passed() && r.oracle_failure.is_none(), "{}", r.summary());
        assert_eq!(r.runs, 10);
    }
}
