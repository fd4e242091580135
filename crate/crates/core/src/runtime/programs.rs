//! Guest programs shipped with the runtime, each paired with an input
//! builder and an oracle computed directly in Rust.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{boot, files_of, link};
use crate::fs::FileImage;
use crate::kernel::{Guest, ProcessState};
use crate::vm::{GuestProgram, StopReason};

/// Assembly sources by name.
pub const SOURCES: &[(&str, &str)] = &[
    ("halt", include_str!("../../guests/halt.s")),
    ("pipeline", include_str!("../../guests/pipeline.s")),
    ("applog", include_str!("../../guests/applog.s")),
    ("swap", include_str!("../../guests/swap.s")),
    ("refclock", include_str!("../../guests/refclock.s")),
    ("bruteforce", include_str!("../../guests/bruteforce.s")),
    ("matmult", include_str!("../../guests/matmult.s")),
    ("qsort", include_str!("../../guests/qsort.s")),
    ("echo", include_str!("../../guests/echo.s")),
    ("launcher", include_str!("../../guests/launcher.s")),
    ("stamp", include_str!("../../guests/stamp.s")),
];

pub fn source(name: &str) -> Option<&'static str> {
    SOURCES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Links a shipped program. Panics if it does not assemble, which the unit
/// tests rule out.
pub fn build(name: &str) -> GuestProgram {
    let src = source(name).unwrap_or_else(|| panic!("no guest program `{name}`"));
    link(src).unwrap_or_else(|e| panic!("{name}.s: {e}"))
}

pub type Predicate = Arc<dyn Fn(&[u8]) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum FileCheck {
    Exact(Vec<u8>),
    Satisfies(&'static str, Predicate),
}

impl fmt::Debug for FileCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FileCheck::Exact(b) => write!(f, "Exact({} bytes)", b.len()),
            FileCheck::Satisfies(d, _) => write!(f, "Satisfies({d})"),
        }
    }
}

/// What a correct run of a workload must end with.
#[derive(Debug, Clone)]
pub struct Expect {
    pub status: StopReason,
    pub files: Vec<(String, FileCheck)>,
}

/// A program with its input files, fuel budget and oracle.
#[derive(Debug, Clone)]
pub struct Workload {
    pub name: String,
    pub program: GuestProgram,
    pub files: FileImage,
    pub fuel: u64,
    pub expect: Expect,
}

impl Workload {
    pub fn guest(&self) -> Guest {
        boot(self.program.clone(), &self.files, self.fuel)
    }

    /// Compares the root's final state against the oracle.
    pub fn check(&self, root: &ProcessState) -> Result<(), String> {
        if root.status != Some(self.expect.status) {
            return Err(format!(
                "{}: status {:?}, expected {}",
                self.name,
                root.status.map(|s| s.to_string()),
                self.expect.status
            ));
        }
        let files = files_of(root).map_err(|e| format!("{}: {e}", self.name))?;
        for (name, check) in &self.expect.files {
            let data = files
                .get(name)
                .map(|e| e.data.as_slice())
                .ok_or_else(|| format!("{}: missing file {name}", self.name))?;
            let ok = match check {
                FileCheck::Exact(want) => data == want.as_slice(),
                FileCheck::Satisfies(_, p) => p(data),
            };
            if !ok {
                return Err(format!("{}: file {name} is wrong ({check:?})", self.name));
            }
        }
        Ok(())
    }
}

pub fn words(ws: &[u32]) -> Vec<u8> {
    ws.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn image(files: &[(&str, Vec<u8>, u32)]) -> FileImage {
    let mut img = FileImage::new();
    for (name, data, flags) in files {
        img.put(name, data.clone(), *flags).expect("valid input file");
    }
    img
}

fn exact(name: &str, data: Vec<u8>) -> (String, FileCheck) {
    (name.to_string(), FileCheck::Exact(data))
}

fn halted(code: u32) -> StopReason {
    StopReason::Halt(code)
}

pub fn halt() -> Workload {
    Workload {
        name: "halt".into(),
        program: build("halt"),
        files: FileImage::new(),
        fuel: 100,
        expect: Expect {
            status: halted(0),
            files: vec![],
        },
    }
}

/// Two fork/wait stages: squares, then their sum.
pub fn pipeline(values: &[u32]) -> Workload {
    let squares: Vec<u32> = values.iter().map(|v| v.wrapping_mul(*v)).collect();
    let sum = squares.iter().fold(0u32, |a, b| a.wrapping_add(*b));
    Workload {
        name: format!("pipeline-{}", values.len()),
        program: build("pipeline"),
        files: image(&[("input", words(values), 0)]),
        fuel: 12_000_000,
        expect: Expect {
            status: halted(0),
            files: vec![
                exact("squares", words(&squares)),
                exact("sum", words(&[sum])),
                exact("result", words(&[values.len() as u32, sum])),
            ],
        },
    }
}

/// `writers` forked processes and the parent append `records` records each
/// to one append-only log.
pub fn append_log(writers: u32, records: u32) -> Workload {
    assert!(writers < super::MAX_SLOTS);
    let mut log = Vec::new();
    for id in 0..=writers {
        for j in 0..records {
            log.extend(words(&[id, j]));
        }
    }
    Workload {
        name: format!("applog-{writers}x{records}"),
        program: build("applog"),
        files: image(&[("params", words(&[writers, records]), 0)]),
        fuel: (writers as u64 + 1) * 2_000_000 + 1_000_000,
        expect: Expect {
            status: halted(0),
            files: vec![exact("log", log)],
        },
    }
}

/// Two threads swap two variables; the result never depends on timing.
pub fn swap() -> Workload {
    Workload {
        name: "swap".into(),
        program: build("swap"),
        files: FileImage::new(),
        fuel: 1_000_000,
        expect: Expect {
            status: halted(0),
            files: vec![exact("result", words(&[2, 1, 0]))],
        },
    }
}

/// A counting thread observed by main before it is joined.
pub fn ref_clock(timer_fuel: u32, work: u32) -> Workload {
    let most = timer_fuel / 4;
    let least = timer_fuel.saturating_sub(400) / 4;
    let final_ok: Predicate = Arc::new(move |d: &[u8]| {
        d.len() == 8
            && (least..=most).contains(&u32::from_le_bytes([d[0], d[1], d[2], d[3]]))
            && d[4..] == 3u32.to_le_bytes()
    });
    Workload {
        name: format!("refclock-{timer_fuel}"),
        program: build("refclock"),
        files: image(&[("params", words(&[timer_fuel, work]), 0)]),
        fuel: timer_fuel as u64 + 4 * work as u64 + 200_000,
        expect: Expect {
            status: halted(0),
            files: vec![
                exact("timestamp", words(&[0])),
                ("final".into(), FileCheck::Satisfies("count ran to fuel-out", final_ok)),
            ],
        },
    }
}

pub fn toy_hash(x: u32) -> u32 {
    let h = x.wrapping_mul(0x9e37_79b1) ^ (x >> 15);
    let h = h.wrapping_mul(0x85eb_ca77);
    h ^ (h >> 13)
}

/// Searches `[0, range)` for a preimage of `toy_hash(secret)`.
pub fn brute_force(secret: u32, range: u32, threads: u32) -> Workload {
    assert!(threads >= 1 && threads < super::MAX_SLOTS && range >= threads);
    let target = toy_hash(secret);
    let answer = (0..range).find(|&x| toy_hash(x) == target).unwrap_or(u32::MAX);
    let per = 20 * (range / threads + threads) as u64 + 5_000;
    Workload {
        name: format!("bruteforce-{range}-t{threads}"),
        program: build("bruteforce"),
        files: image(&[("params", words(&[target, range, threads, per as u32]), 0)]),
        fuel: threads as u64 * per + 1_000_000,
        expect: Expect {
            status: halted(0),
            files: vec![exact("answer", words(&[answer, 0]))],
        },
    }
}

pub fn matmult_oracle(n: usize, a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut c = vec![0u32; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = (0..n).fold(0u32, |s, k| s.wrapping_add(a[i * n + k].wrapping_mul(b[k * n + j])));
        }
    }
    c
}

/// `n x n` matrix product with rows split over `threads` threads.
pub fn matmult(n: u32, threads: u32, seed: u64) -> Workload {
    assert!(n >= 1 && n <= 1024 && threads >= 1 && threads < super::MAX_SLOTS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (n * n) as usize;
    let a: Vec<u32> = (0..len).map(|_| rng.gen()).collect();
    let b: Vec<u32> = (0..len).map(|_| rng.gen()).collect();
    let c = matmult_oracle(n as usize, &a, &b);
    let rows = n.div_ceil(threads) as u64;
    let per = rows * n as u64 * (7 * n as u64 + 40) + 10_000;
    Workload {
        name: format!("matmult-{n}-t{threads}"),
        program: build("matmult"),
        files: image(&[
            ("params", words(&[n, threads, per as u32]), 0),
            ("a", words(&a), 0),
            ("b", words(&b), 0),
        ]),
        fuel: threads as u64 * per + 1_000_000,
        expect: Expect {
            status: halted(0),
            files: vec![exact("c", words(&c))],
        },
    }
}

/// Parallel quicksort of `data`, forking threads down to `depth` levels.
pub fn qsort(data: &[u32], depth: u32) -> Workload {
    assert!(data.len() <= 1 << 20 && depth <= 5);
    let mut sorted = data.to_vec();
    sorted.sort_unstable();
    let n = data.len() as u64;
    let log = 64 - n.max(2).leading_zeros() as u64;
    let budget = 60 * n * log + 1_000_000;
    Workload {
        name: format!("qsort-{}-d{depth}", data.len()),
        program: build("qsort"),
        files: image(&[
            ("params", words(&[data.len() as u32, depth, budget as u32]), 0),
            ("data", words(data), 0),
        ]),
        fuel: 2 * budget,
        expect: Expect {
            status: halted(0),
            files: vec![exact("sorted", words(&sorted))],
        },
    }
}

pub fn random_words(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// A launcher that execs `echo` stored in its file system.
pub fn exec_echo(args: &[u8]) -> Workload {
    Workload {
        name: "exec-echo".into(),
        program: build("launcher"),
        files: image(&[
            ("prog", build("echo").to_bytes(), 0),
            ("args", args.to_vec(), 0),
        ]),
        fuel: 200_000,
        expect: Expect {
            status: halted(args.len() as u32),
            files: vec![exact("before", b"before".to_vec()), exact("echo", args.to_vec())],
        },
    }
}

/// Every shipped workload at a size small enough for randomized testing.
pub fn catalog(rng: &mut impl Rng) -> Vec<Workload> {
    let n = rng.gen_range(1..200);
    vec![
        halt(),
        pipeline(&random_words(n, rng.gen())),
        append_log(rng.gen_range(1..5), rng.gen_range(1..20)),
        swap(),
        ref_clock(rng.gen_range(1_000..50_000), rng.gen_range(0..5_000)),
        brute_force(rng.gen_range(0..4_000), 4_000, rng.gen_range(1..5)),
        matmult(rng.gen_range(1..12), rng.gen_range(1..5), rng.gen()),
        qsort(&random_words(rng.gen_range(0..3_000), rng.gen()), rng.gen_range(0..4)),
        exec_echo(b"hello from exec"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shipped_program_links() {
        for (name, _) in SOURCES {
            let p = build(name);
            assert!(p.code.len() > 0, "{name}");
        }
    }

    #[test]
    fn toy_hash_mixes() {
        assert_ne!(toy_hash(1), toy_hash(2));
        assert_eq!(toy_hash(0), 0);
    }

    #[test]
    fn matmult_oracle_small() {
        assert_eq!(matmult_oracle(2, &[1, 2, 3, 4], &[5, 6, 7, 8]), vec![19, 22, 43, 50]);
    }
}
