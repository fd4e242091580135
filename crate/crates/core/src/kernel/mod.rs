//! The determinism-enforcing kernel model.
//!
//! A guest is a tree of single-threaded processes that share no state. A
//! process talks only to its parent and its own children, and only through
//! three calls: PUT (copy into a stopped child, optionally snapshot and
//! start it), GET (copy or merge out of a stopped child) and RET (stop
//! yourself). Because every interaction happens at a point fixed by the
//! interacting processes' own instruction streams, the final state of a
//! guest does not depend on how its runnable processes were scheduled.

mod guest;
pub mod merge;
mod sched;
pub mod trace;

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::space::AddressSpace;
use crate::vm::{ExceptKind, ProgramError, Registers, StopReason};

pub use guest::{FuelStats, Guest, ProcessState, Terminal};
pub use merge::{merge_region, MergeReport};
pub use trace::ProcessPath;

/// Process-local library services reachable through `SYS` selector 3.
///
/// A service sees only the calling process's registers and memory, runs to
/// completion without blocking, and must be a pure function of that state.
pub trait Services: Send + Sync {
    fn call(
        &self,
        id: u32,
        args: [u32; 6],
        regs: &mut Registers,
        space: &mut AddressSpace,
    ) -> Result<(), ExceptKind>;
}

/// Deliberate kernel defects used to check that the fuzz suite notices
/// determinism violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutation {
    /// GET reads a child that is not stopped instead of waiting for it.
    LiveChildMerge,
    /// A started child draws from its parent's live fuel counter instead of
    /// a budget reserved at start.
    SharedFuelCounter,
}

#[derive(Clone)]
pub struct KernelConfig {
    /// Share pages between address spaces until written. Turning this off
    /// must not change any observable result.
    pub cow: bool,
    /// Hash every quiescent process around each PUT/GET and fail if one that
    /// the call does not name changed.
    pub checker: bool,
    pub services: Option<Arc<dyn Services>>,
    pub mutation: Option<Mutation>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            cow: true,
            checker: false,
            services: None,
            mutation: None,
        }
    }
}

impl std::fmt::Debug for KernelConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelConfig")
            .field("cow", &self.cow)
            .field("checker", &self.checker)
            .field("services", &self.services.is_some())
            .field("mutation", &self.mutation)
            .finish()
    }
}

/// Random pauses injected between execution slices, outside guest
/// semantics, to perturb timing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stall {
    pub max: Duration,
    pub probability: f64,
}

#[derive(Debug, Clone)]
pub struct ScheduleOptions {
    pub workers: usize,
    pub seed: u64,
    /// Inclusive bounds on the number of instructions a process runs before
    /// it is preempted and requeued.
    pub slice: (u64, u64),
    pub stall: Option<Stall>,
}

impl ScheduleOptions {
    pub fn new(workers: usize, seed: u64) -> ScheduleOptions {
        ScheduleOptions {
            workers,
            seed,
            slice: (500, 20_000),
            stall: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("malformed program: {0}")]
    Program(#[from] ProgramError),
    #[error("guest deadlock: root is {0} at quiescence")]
    Deadlock(String),
    #[error("isolation violated: {0}")]
    Isolation(String),
    #[error("kernel worker panicked")]
    WorkerPanic,
}

/// The (kind, detail) pair GET reports for a stop reason.
pub fn stop_code(reason: Option<&StopReason>) -> (u32, u32) {
    use crate::vm::abi::stop_kind::*;
    match reason {
        None => (NEVER_RUN, 0),
        Some(StopReason::Halt(c)) => (HALT, *c),
        Some(StopReason::Except(k)) => (EXCEPT, k.code()),
        Some(StopReason::FuelOut) => (FUELOUT, 0),
        Some(StopReason::Forced) | Some(StopReason::Syscall(_)) => (FORCED, 0),
    }
}
