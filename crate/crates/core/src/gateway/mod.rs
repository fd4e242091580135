//! The job gateway: accepts jobs, runs each as a deterministic guest inside
//! a transaction over the customer's store, and holds results back until
//! the next quantum boundary.
//!
//! A job sees its base snapshot, its input files and `/env/now`, the
//! submission time rounded down to the quantum. It may leave a follow-up
//! request in `/env/followup`. Nothing else flows in while it runs.

pub mod clock;
pub mod manifest;
pub mod record;
pub mod store;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::fs::FileImage;
use crate::kernel::{KernelError, Mutation, ScheduleOptions, Stall};
use crate::runtime::{self, files_of};
use crate::vm::{GuestProgram, StopReason};

pub use clock::{ceil_to, floor_to, Clock, LogicalClock, WallClock};
pub use manifest::{JobSpec, Manifest};
pub use record::ResultRecord;
pub use store::{CommitOutcome, FileDiff, Store};

pub type JobId = u64;

pub const ENV_NOW: &str = "/env/now";
pub const ENV_FOLLOWUP: &str = "/env/followup";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Io(String),
    #[error("bad program: {0}")]
    Program(String),
    #[error("unknown customer `{0}`")]
    UnknownCustomer(String),
    #[error("customer `{0}` already exists")]
    CustomerExists(String),
    #[error("program is {size} bytes, the limit is {limit}")]
    ProgramTooLarge { size: usize, limit: usize },
    #[error("store: {0}")]
    Store(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Deliberate gateway defects for mutation testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GatewayMutation {
    /// `/env/now` carries the unrounded wall clock instead of the job's
    /// timestamp.
    WallClockNow,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub quantum_ms: u64,
    /// Kernel workers per job.
    pub workers: usize,
    /// Jobs executed at once by [`Gateway::run_ready`].
    pub parallel_jobs: usize,
    pub max_program_bytes: usize,
    pub stall: Option<Stall>,
    /// Seeds each job's schedule; provider-side, invisible to guests.
    pub seed: u64,
    pub mutation: Option<GatewayMutation>,
    pub kernel_mutation: Option<Mutation>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            quantum_ms: 1000,
            workers: 2,
            parallel_jobs: 2,
            max_program_bytes: 1 << 20,
            stall: None,
            seed: 0,
            mutation: None,
            kernel_mutation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub id: JobId,
    pub customer: String,
    pub program: Arc<GuestProgram>,
    pub inputs: Vec<(String, Vec<u8>)>,
    pub base_version: u64,
    pub timestamp: u64,
    pub fuel: u64,
    pub followup_allowed: bool,
}

/// A follow-up request as written to `/env/followup`:
///
/// ```text
/// delay: 3
/// program: self
/// input query saved-query
/// ```
///
/// `delay` counts quanta after the parent's release. `program` is `self` or
/// the name of a store file holding a DVM1 program, and each input names a
/// store file. Store files are read from the version the parent committed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FollowupRequest {
    pub delay: u64,
    pub program: Option<String>,
    pub inputs: Vec<(String, String)>,
}

impl FollowupRequest {
    pub fn parse(text: &str) -> Result<FollowupRequest, String> {
        let (mut delay, mut program, mut inputs) = (None, None, Vec::new());
        for l in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = l.strip_prefix("input ") {
                match rest.split_whitespace().collect::<Vec<_>>()[..] {
                    [n, f] => inputs.push((n.to_string(), f.to_string())),
                    _ => return Err(format!("bad line `{l}`")),
                }
            } else if let Some(v) = l.strip_prefix("delay:") {
                delay = Some(v.trim().parse().map_err(|_| format!("bad delay `{}`", v.trim()))?);
            } else if let Some(v) = l.strip_prefix("program:") {
                program = match v.trim() {
                    "self" => None,
                    name => Some(name.to_string()),
                };
            } else {
                return Err(format!("bad line `{l}`"));
            }
        }
        Ok(FollowupRequest {
            delay: delay.ok_or("missing delay")?,
            program,
            inputs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FollowupOutcome {
    None,
    Submitted(JobId),
    Rejected(String),
}

/// What running a job produced, before commit.
#[derive(Debug, Clone)]
pub struct Executed {
    pub job: Job,
    pub status: StopReason,
    /// Empty unless the job halted.
    pub diff: FileDiff,
    pub fuel_consumed: u64,
    pub followup: Option<Result<FollowupRequest, String>>,
    pub output_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobResult {
    pub job: JobId,
    pub customer: String,
    pub status: StopReason,
    pub diff: FileDiff,
    pub fuel_consumed: u64,
    pub commit: CommitOutcome,
    pub release_time: u64,
    pub followup: FollowupOutcome,
}

/// A job bound to its base snapshot. Running it touches nothing shared, so
/// commits that land meanwhile cannot affect it.
#[derive(Debug, Clone)]
pub struct PreparedJob {
    pub job: Job,
    start: FileImage,
    config: GatewayConfig,
}

impl PreparedJob {
    /// The files the root process starts with.
    pub fn start_image(&self) -> &FileImage {
        &self.start
    }

    pub fn run(&self) -> Result<Executed, GatewayError> {
        let job = &self.job;
        let mut kconf = runtime::runtime_config();
        kconf.mutation = self.config.kernel_mutation;
        let guest = runtime::boot((*job.program).clone(), &self.start, job.fuel).with_config(kconf);
        let opts = ScheduleOptions {
            stall: self.config.stall,
            ..ScheduleOptions::new(self.config.workers, self.config.seed ^ job.id)
        };
        let term = guest.run(&opts).map_err(|e| match e {
            KernelError::Program(p) => GatewayError::Program(p.to_string()),
            e => GatewayError::Internal(format!("job {}: {e}", job.id)),
        })?;
        let root = term.root();
        let status = root.status.expect("root stopped");
        let files = files_of(root).map_err(|e| GatewayError::Internal(format!("job {}: {e}", job.id)))?;
        let output_hash = runtime::output_hash(&status, &files, &term.log);
        let (diff, followup) = if matches!(status, StopReason::Halt(_)) {
            let followup = files.get(ENV_FOLLOWUP).map(|f| {
                std::str::from_utf8(&f.data)
                    .map_err(|_| "not UTF-8".to_string())
                    .and_then(FollowupRequest::parse)
            });
            (FileDiff::between(&self.start, &files), followup)
        } else {
            (FileDiff::default(), None)
        };
        Ok(Executed {
            job: job.clone(),
            status,
            diff,
            fuel_consumed: term.total_retired(),
            followup,
            output_hash,
        })
    }
}

#[derive(Debug, Default)]
struct State {
    store: Store,
    next_id: JobId,
    /// Submitted jobs, in id order.
    queue: VecDeque<Job>,
    /// Follow-ups whose timestamp is still in the future. Their base version
    /// is fixed when they become due.
    scheduled: Vec<Job>,
    /// Results waiting for their release time.
    held: Vec<JobResult>,
    released: u64,
}

pub struct Gateway {
    config: GatewayConfig,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, clock: Arc<dyn Clock>) -> Gateway {
        Gateway::with_store(config, clock, Store::new())
    }

    pub fn with_store(config: GatewayConfig, clock: Arc<dyn Clock>, store: Store) -> Gateway {
        assert!(config.quantum_ms > 0, "quantum must be positive");
        Gateway {
            config,
            clock,
            state: Mutex::new(State {
                store,
                next_id: 1,
                ..State::default()
            }),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn state(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("gateway state poisoned")
    }

    pub fn add_customer(&self, name: &str) -> Result<(), GatewayError> {
        self.state().store.add_customer(name)
    }

    /// A copy of the store as of now.
    pub fn store(&self) -> Store {
        self.state().store.clone()
    }

    /// Accepts a job, stamping it with the current quantum and the latest
    /// store version.
    pub fn submit(&self, spec: JobSpec) -> Result<JobId, GatewayError> {
        self.state().store.latest_version(&spec.customer)?;
        let size = spec.program.size();
        if size > self.config.max_program_bytes {
            return Err(GatewayError::ProgramTooLarge {
                size,
                limit: self.config.max_program_bytes,
            });
        }
        spec.program
            .validate()
            .map_err(|e| GatewayError::Program(e.to_string()))?;
        let mut st = self.state();
        let base_version = st.store.latest_version(&spec.customer)?;
        let id = st.next_id;
        st.next_id += 1;
        st.queue.push_back(Job {
            id,
            customer: spec.customer,
            program: Arc::new(spec.program),
            inputs: spec.inputs,
            base_version,
            timestamp: floor_to(self.clock.now_ms(), self.config.quantum_ms),
            fuel: spec.fuel,
            followup_allowed: spec.followup_allowed,
        });
        Ok(id)
    }

    /// Jobs submitted but not yet executed, including follow-ups not yet due.
    pub fn pending(&self) -> usize {
        let st = self.state();
        st.queue.len() + st.scheduled.len()
    }

    /// Results not yet released.
    pub fn held(&self) -> usize {
        self.state().held.len()
    }

    /// Moves follow-ups whose time has come into the queue, then removes and
    /// returns every queued job.
    pub fn take_ready(&self) -> Vec<Job> {
        let now = self.clock.now_ms();
        let mut st = self.state();
        let (due, later): (Vec<Job>, Vec<Job>) =
            std::mem::take(&mut st.scheduled).into_iter().partition(|j| j.timestamp <= now);
        st.scheduled = later;
        for mut job in due {
            match st.store.latest_version(&job.customer) {
                Ok(v) => job.base_version = v,
                Err(_) => continue,
            }
            st.queue.push_back(job);
        }
        let mut jobs: Vec<Job> = st.queue.drain(..).collect();
        jobs.sort_by_key(|j| j.id);
        jobs
    }

    /// Binds `job` to its base snapshot.
    pub fn prepare(&self, job: Job) -> Result<PreparedJob, GatewayError> {
        let mut start = (*self.state().store.snapshot(&job.customer, job.base_version)?).clone();
        let bad = |e: crate::fs::FsError| GatewayError::Manifest(format!("job {}: {e}", job.id));
        for (name, data) in &job.inputs {
            start.put(name, data.clone(), 0).map_err(bad)?;
        }
        let now = match self.config.mutation {
            Some(GatewayMutation::WallClockNow) => WallClock.now_ms(),
            None => job.timestamp,
        };
        start.put(ENV_NOW, now.to_string().into_bytes(), 0).map_err(bad)?;
        Ok(PreparedJob {
            job,
            start,
            config: self.config.clone(),
        })
    }

    /// Installs an executed job's diff if its base is still current, handles
    /// its follow-up request and queues the result for release.
    pub fn commit(&self, ex: Executed) -> Result<JobResult, GatewayError> {
        let q = self.config.quantum_ms;
        let completion = self.clock.now_ms().max(ex.job.timestamp + 1);
        let release_time = ceil_to(completion, q);
        let mut st = self.state();
        let commit = if matches!(ex.status, StopReason::Halt(_)) {
            st.store
                .commit(&ex.job.customer, ex.job.base_version, Some(ex.job.id), &ex.diff)?
        } else {
            CommitOutcome::Discarded
        };
        let followup = match (&ex.followup, &commit) {
            (None, _) => FollowupOutcome::None,
            (Some(_), _) if !ex.job.followup_allowed => {
                FollowupOutcome::Rejected("follow-ups not allowed".into())
            }
            (Some(_), c) if !matches!(c, CommitOutcome::Committed(_)) => {
                FollowupOutcome::Rejected("job did not commit".into())
            }
            (Some(Err(e)), _) => FollowupOutcome::Rejected(e.clone()),
            (Some(Ok(req)), CommitOutcome::Committed(v)) => {
                match followup_job(&st.store, &ex.job, *v, req) {
                    Ok(mut job) => {
                        job.id = st.next_id;
                        st.next_id += 1;
                        job.timestamp = release_time + req.delay * q;
                        let id = job.id;
                        st.scheduled.push(job);
                        FollowupOutcome::Submitted(id)
                    }
                    Err(e) => FollowupOutcome::Rejected(e),
                }
            }
            (Some(Ok(_)), _) => unreachable!("non-committed outcomes handled above"),
        };
        let result = JobResult {
            job: ex.job.id,
            customer: ex.job.customer,
            status: ex.status,
            diff: ex.diff,
            fuel_consumed: ex.fuel_consumed,
            commit,
            release_time,
            followup,
        };
        st.held.push(result.clone());
        Ok(result)
    }

    /// Executes every ready job, up to `parallel_jobs` at a time, and commits
    /// them in job-id order. Returns the committed job ids.
    pub fn run_ready(&self) -> Result<Vec<JobId>, GatewayError> {
        let prepared = self
            .take_ready()
            .into_iter()
            .map(|j| self.prepare(j))
            .collect::<Result<Vec<_>, _>>()?;
        let slots: Vec<Mutex<Option<Result<Executed, GatewayError>>>> =
            prepared.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..self.config.parallel_jobs.max(1).min(prepared.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(p) = prepared.get(i) else { break };
                    *slots[i].lock().expect("slot") = Some(p.run());
                });
            }
        });
        let mut ids = Vec::new();
        for slot in slots {
            let ex = slot.into_inner().expect("slot").expect("every job ran")?;
            ids.push(self.commit(ex)?.job);
        }
        Ok(ids)
    }

    /// Hands out every held result whose release time has passed, ordered
    /// by release time, then job id.
    pub fn release(&self) -> Vec<JobResult> {
        let now = self.clock.now_ms();
        let mut st = self.state();
        let (mut out, keep): (Vec<_>, Vec<_>) =
            std::mem::take(&mut st.held).into_iter().partition(|r| r.release_time <= now);
        st.held = keep;
        out.sort_by_key(|r| (r.release_time, r.job));
        st.released += out.len() as u64;
        out
    }

    /// The earliest time anything waiting becomes actionable.
    pub fn next_event(&self) -> Option<u64> {
        let st = self.state();
        let held = st.held.iter().map(|r| r.release_time);
        let sched = st.scheduled.iter().map(|j| j.timestamp);
        held.chain(sched).min()
    }
}

fn followup_job(store: &Store, parent: &Job, version: u64, req: &FollowupRequest) -> Result<Job, String> {
    let image = store
        .snapshot(&parent.customer, version)
        .map_err(|e| e.to_string())?;
    let file = |name: &str| {
        image
            .get(name)
            .filter(|f| !f.meta.conflict())
            .map(|f| f.data.clone())
            .ok_or_else(|| format!("no store file `{name}`"))
    };
    let program = match &req.program {
        None => Arc::clone(&parent.program),
        Some(name) => {
            let p = GuestProgram::from_bytes(&file(name)?).map_err(|e| format!("{name}: {e}"))?;
            Arc::new(p)
        }
    };
    let inputs = req
        .inputs
        .iter()
        .map(|(n, f)| Ok((n.clone(), file(f)?)))
        .collect::<Result<_, String>>()?;
    Ok(Job {
        id: 0,
        customer: parent.customer.clone(),
        program,
        inputs,
        base_version: 0,
        timestamp: 0,
        fuel: parent.fuel,
        followup_allowed: parent.followup_allowed,
    })
}
