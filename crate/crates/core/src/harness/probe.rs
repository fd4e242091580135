use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::gateway::{
    Gateway, GatewayConfig, GatewayMutation, JobSpec, LogicalClock, ResultRecord,
};
use crate::kernel::{Mutation, Stall};
use crate::runtime::programs;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub runs: usize,
    pub max_stall: Duration,
    pub stall_probability: f64,
    pub quantum_ms: u64,
    pub workers: usize,
    pub seed: u64,
    /// Jobs submitted together in each run; the customer field is replaced.
    pub jobs: Vec<JobSpec>,
    pub mutation: Option<GatewayMutation>,
    pub kernel_mutation: Option<Mutation>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            runs: 50,
            max_stall: Duration::from_millis(10),
            stall_probability: 0.5,
            quantum_ms: 1000,
            workers: 4,
            seed: 0,
            jobs: default_jobs(),
            mutation: None,
            kernel_mutation: None,
        }
    }
}

fn spec(w: programs::Workload) -> JobSpec {
    JobSpec {
        customer: String::new(),
        inputs: w
            .files
            .files()
            .into_iter()
            .map(|(n, e)| (n.to_string(), e.data.clone()))
            .collect(),
        program: w.program,
        fuel: w.fuel,
        followup_allowed: false,
    }
}

/// A job that reports its timestamp, a reference-clock job and the swap
/// threads.
pub fn default_jobs() -> Vec<JobSpec> {
    let mut stamp = spec(programs::halt());
    stamp.program = programs::build("stamp");
    stamp.fuel = 100_000;
    vec![stamp, spec(programs::ref_clock(20_000, 3_000)), spec(programs::swap())]
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    /// Digest of every customer-visible field except release times.
    pub output_hash: [u8; 32],
    /// The timestamp the first job read, as it wrote it to "stamp".
    pub now: Option<String>,
    pub release_times: Vec<u64>,
    /// Observed outside the guest; free to vary.
    pub wall: Duration,
}

#[derive(Debug, Clone)]
pub struct TimingProbeReport {
    pub quantum_ms: u64,
    pub runs: Vec<ProbeRun>,
    /// Every customer's store rebuilt from its commit log matched its latest
    /// version.
    pub replay_ok: bool,
}

impl TimingProbeReport {
    pub fn unique_outputs(&self) -> usize {
        self.runs.iter().map(|r| r.output_hash).collect::<BTreeSet<_>>().len()
    }

    pub fn unique_now(&self) -> usize {
        self.runs.iter().map(|r| r.now.clone()).collect::<BTreeSet<_>>().len()
    }

    pub fn releases_aligned(&self) -> bool {
        self.runs
            .iter()
            .flat_map(|r| &r.release_times)
            .all(|t| t % self.quantum_ms == 0)
    }

    pub fn wall_spread(&self) -> (Duration, Duration) {
        let walls = self.runs.iter().map(|r| r.wall);
        (walls.clone().min().unwrap_or_default(), walls.max().unwrap_or_default())
    }

    pub fn passed(&self) -> bool {
        self.unique_outputs() == 1 && self.unique_now() == 1 && self.releases_aligned() && self.replay_ok
    }

    pub fn summary(&self) -> String {
        let (lo, hi) = self.wall_spread();
        format!(
            "{} runs: {} unique output hash(es), {} unique /env/now value(s), releases aligned: {}, \
             store replay: {}, wall {:.1?}..{:.1?}",
            self.runs.len(),
            self.unique_outputs(),
            self.unique_now(),
            self.releases_aligned(),
            if self.replay_ok { "ok" } else { "MISMATCH" },
            lo,
            hi
        )
    }
}

/// Submits the probe jobs `runs` times, each time for a fresh customer,
/// with random worker stalls and submission times spread over one quantum.
pub fn probe_timing(cfg: &ProbeConfig) -> TimingProbeReport {
    let q = cfg.quantum_ms;
    let start = 5 * q;
    let clock = Arc::new(LogicalClock::new(start));
    let gw = Gateway::new(
        GatewayConfig {
            quantum_ms: q,
            workers: cfg.workers,
            parallel_jobs: 1,
            stall: Some(Stall {
                max: cfg.max_stall,
                probability: cfg.stall_probability,
            }),
            seed: cfg.seed,
            mutation: cfg.mutation,
            kernel_mutation: cfg.kernel_mutation,
            ..GatewayConfig::default()
        },
        clock.clone(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut runs = Vec::new();
    let mut customers = Vec::new();
    for i in 0..cfg.runs {
        let customer = format!("probe-{i}");
        gw.add_customer(&customer).expect("fresh customer");
        clock.set(start + rng.gen_range(0..q));
        let began = Instant::now();
        let mut h = Sha256::new();
        for j in &cfg.jobs {
            let job = JobSpec {
                customer: customer.clone(),
                ..j.clone()
            };
            match gw.submit(job).and_then(|_| gw.run_ready()) {
                Ok(_) => h.update(b"ok\n"),
                Err(e) => h.update(format!("{e}\n")),
            }
        }
        let wall = began.elapsed();
        runs.push((h, wall));
        customers.push(customer);
    }
    clock.set(start + 10 * q);
    let results = gw.release();
    let store = gw.store();
    let mut out = Vec::new();
    for (i, (mut h, wall)) in runs.into_iter().enumerate() {
        let mine: Vec<_> = results.iter().filter(|r| r.customer == customers[i]).collect();
        let mut now = None;
        for r in &mine {
            let mut rec = ResultRecord::from(*r);
            rec.job = 0;
            rec.customer = String::new();
            h.update(rec.content_text());
            if now.is_none() {
                now = r.diff.changed.get("stamp").map(|(_, d)| String::from_utf8_lossy(d).into_owned());
            }
        }
        out.push(ProbeRun {
            output_hash: h.finalize().into(),
            now,
            release_times: mine.iter().map(|r| r.release_time).collect(),
            wall,
        });
    }
    let replay_ok = customers.iter().all(|c| {
        let v = store.latest_version(c).expect("customer exists");
        match (store.replay(c), store.snapshot(c, v)) {
            (Ok(a), Ok(b)) => a.canonical_bytes() == b.canonical_bytes(),
            _ => false,
        }
    });
    TimingProbeReport {
        quantum_ms: q,
        runs: out,
        replay_ok,
    }
}
