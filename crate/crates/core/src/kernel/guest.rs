use std::collections::VecDeque;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::merge::merge_region;
use super::trace::{format_transfer, ProcessPath};
use super::{sched, stop_code, KernelConfig, KernelError, Mutation, ScheduleOptions};
use crate::space::AddressSpace;
use crate::vm::abi::{status, Options, Transfer};
use crate::vm::{GuestProgram, Registers, StopReason};

pub(crate) type Pid = usize;

/// Fuel bookkeeping for one process. For a whole guest,
/// `initial = sum(retired) + sum(remaining)` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct FuelStats {
    /// Received from the parent at START.
    pub granted: u64,
    pub retired: u64,
    /// Handed to children at START.
    pub delegated: u64,
    /// Unused child fuel returned to this process.
    pub refunds_in: u64,
    /// Unused fuel this process returned to its parent.
    pub refunds_out: u64,
}

/// State a process carries while it runs. A worker owns it for the length
/// of a slice; otherwise it sits in the process table.
pub(crate) struct Exec {
    pub regs: Registers,
    pub space: AddressSpace,
    pub fuel: u64,
    pub pool: Option<Arc<AtomicU64>>,
    pub since_start: u64,
    pub stats: FuelStats,
    pub events: Vec<String>,
}

impl Exec {
    fn empty() -> Exec {
        Exec {
            regs: Registers::default(),
            space: AddressSpace::new(),
            fuel: 0,
            pool: None,
            since_start: 0,
            stats: FuelStats::default(),
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Pending {
    Put(Transfer),
    Get(Transfer),
}

impl Pending {
    fn transfer(&self) -> &Transfer {
        match self {
            Pending::Put(t) | Pending::Get(t) => t,
        }
    }
}

pub(crate) enum State {
    Runnable,
    Running,
    Waiting(Pending),
    Stopped(Option<StopReason>),
}

pub(crate) struct Proc {
    path: ProcessPath,
    parent: Option<Pid>,
    index: u32,
    children: Vec<Pid>,
    pub state: State,
    pub exec: Option<Exec>,
    snapshot: Option<AddressSpace>,
    refund_pending: bool,
}

pub(crate) enum Outcome {
    Continue,
    Wait,
}

pub(crate) struct Table {
    pub procs: Vec<Proc>,
    pub queues: Vec<VecDeque<Pid>>,
    pub running: usize,
    pub finished: bool,
    pub error: Option<KernelError>,
    pub cfg: KernelConfig,
}

fn validate(put: bool, t: &Transfer) -> Result<(), u32> {
    let allowed = if put {
        Options::COPY_REGS | Options::SNAP | Options::START | Options::ZERO
    } else {
        Options::COPY_REGS | Options::MERGE
    };
    if t.options & !allowed.bits() != 0 {
        return Err(status::EINVAL);
    }
    let fits = |a: u32, len: u64| a as u64 + len <= 1 << 32;
    if (t.local | t.remote | t.len) & 3 != 0
        || !fits(t.local, t.len as u64)
        || !fits(t.remote, t.len as u64)
    {
        return Err(status::ERANGE);
    }
    if !put && t.options().contains(Options::MERGE) {
        let (buf, cap) = conflict_buffer(t);
        if buf & 3 != 0 || !fits(buf, cap as u64 * 4) {
            return Err(status::ERANGE);
        }
    }
    Ok(())
}

/// GET reuses the fuel-limit registers: `r6` is the address of a buffer for
/// conflicting parent addresses (0 for none), `r7` its capacity in words.
fn conflict_buffer(t: &Transfer) -> (u32, u32) {
    let buf = t.limit as u32;
    let cap = if buf == 0 { 0 } else { (t.limit >> 32) as u32 };
    (buf, cap)
}

fn proc_fingerprint(p: &Proc) -> Option<[u8; 32]> {
    let e = p.exec.as_ref()?;
    let mut h = Sha256::new();
    for r in e.regs.gpr {
        h.update(r.to_le_bytes());
    }
    h.update(e.regs.pc.to_le_bytes());
    h.update(e.fuel.to_le_bytes());
    e.space.hash_into(&mut h);
    if let Some(s) = &p.snapshot {
        h.update(b"snap");
        s.hash_into(&mut h);
    }
    Some(h.finalize().into())
}

impl Table {
    fn new(root: Exec, cfg: KernelConfig, workers: usize) -> Table {
        let mut queues = vec![VecDeque::new(); workers];
        queues[0].push_back(0);
        Table {
            procs: vec![Proc {
                path: ProcessPath::root(),
                parent: None,
                index: 0,
                children: Vec::new(),
                state: State::Runnable,
                exec: Some(root),
                snapshot: None,
                refund_pending: false,
            }],
            queues,
            running: 0,
            finished: false,
            error: None,
            cfg,
        }
    }

    /// Takes a process from this worker's queue, or steals one from a
    /// randomly chosen other worker.
    pub fn pick(&mut self, worker: usize, rng: &mut impl Rng) -> Option<Pid> {
        let own = if rng.gen_bool(0.5) {
            self.queues[worker].pop_front()
        } else {
            self.queues[worker].pop_back()
        };
        if own.is_some() {
            return own;
        }
        let n = self.queues.len();
        let start = rng.gen_range(0..n);
        (0..n)
            .map(|k| (start + k) % n)
            .filter(|&v| v != worker)
            .find_map(|v| self.queues[v].pop_front())
    }

    /// Handles a PUT or GET from `pid`, whose execution state the caller
    /// holds. Returns `Wait` if the named child is still running.
    pub fn transfer(
        &mut self,
        pid: Pid,
        exec: &mut Exec,
        pending: Pending,
        worker: usize,
    ) -> Result<Outcome, KernelError> {
        let put = matches!(pending, Pending::Put(_));
        let t = *pending.transfer();
        let kind = if put { "PUT" } else { "GET" };
        let code = match validate(put, &t) {
            Err(code) => Some(code),
            Ok(()) => {
                let n = self.procs[pid].children.len();
                let idx = t.child as usize;
                if idx > n || (idx == n && !put) {
                    Some(status::ECHILD)
                } else {
                    None
                }
            }
        };
        if let Some(code) = code {
            exec.regs.gpr[0] = code;
            exec.events
                .push(format!("{} status={code}", format_transfer(kind, &t)));
            return Ok(Outcome::Continue);
        }
        let idx = t.child as usize;
        if idx == self.procs[pid].children.len() {
            let cpid = self.procs.len();
            let path = self.procs[pid].path.child(t.child);
            self.procs.push(Proc {
                path,
                parent: Some(pid),
                index: t.child,
                children: Vec::new(),
                state: State::Stopped(None),
                exec: Some(Exec::empty()),
                snapshot: None,
                refund_pending: false,
            });
            self.procs[pid].children.push(cpid);
        }
        let cpid = self.procs[pid].children[idx];
        let child = &self.procs[cpid];
        let ready = matches!(child.state, State::Stopped(_))
            || (!put
                && self.cfg.mutation == Some(Mutation::LiveChildMerge)
                && child.exec.is_some());
        if ready {
            self.perform(pid, exec, cpid, pending, worker)?;
            Ok(Outcome::Continue)
        } else {
            Ok(Outcome::Wait)
        }
    }

    fn fingerprints(&self, a: Pid, b: Pid) -> Vec<(Pid, Option<[u8; 32]>)> {
        (0..self.procs.len())
            .filter(|&p| p != a && p != b)
            .map(|p| (p, proc_fingerprint(&self.procs[p])))
            .collect()
    }

    fn perform(
        &mut self,
        pid: Pid,
        pexec: &mut Exec,
        cpid: Pid,
        pending: Pending,
        worker: usize,
    ) -> Result<(), KernelError> {
        if self.procs[cpid].parent != Some(pid) {
            return Err(KernelError::Isolation(format!(
                "{} addressed {}, which is not its child",
                self.procs[pid].path, self.procs[cpid].path
            )));
        }
        let before = self.cfg.checker.then(|| self.fingerprints(pid, cpid));
        let share = self.cfg.cow;
        let shared_fuel = self.cfg.mutation == Some(Mutation::SharedFuelCounter);
        let child = &mut self.procs[cpid];
        let mut line = match pending {
            Pending::Put(t) => format_transfer("PUT", &t),
            Pending::Get(t) => format_transfer("GET", &t),
        };
        let stopped = matches!(child.state, State::Stopped(_));
        let mut cexec = child.exec.take().expect("child state is resident");
        if stopped && child.refund_pending {
            child.refund_pending = false;
            let r = std::mem::take(&mut cexec.fuel);
            cexec.stats.refunds_out += r;
            pexec.fuel += r;
            pexec.stats.refunds_in += r;
            if r > 0 {
                line.push_str(&format!(" refund={r}"));
            }
        }
        let mut started = false;
        match pending {
            Pending::Put(t) => {
                let opts = t.options();
                if opts.contains(Options::ZERO) {
                    cexec.space.clear();
                }
                cexec
                    .space
                    .copy_from(&pexec.space, t.local, t.remote, t.len as u64, share);
                if opts.contains(Options::COPY_REGS) {
                    // The parent's pc already points past its SYS.
                    cexec.regs = pexec.regs;
                }
                if opts.contains(Options::SNAP) {
                    child.snapshot = Some(if share {
                        cexec.space.clone()
                    } else {
                        cexec.space.deep_clone()
                    });
                }
                if opts.contains(Options::START) {
                    let grant = if shared_fuel {
                        cexec.pool = pexec.pool.clone();
                        t.limit
                    } else {
                        let g = t.limit.min(pexec.fuel);
                        pexec.fuel -= g;
                        cexec.fuel += g;
                        g
                    };
                    pexec.stats.delegated += grant;
                    cexec.stats.granted += grant;
                    cexec.since_start = 0;
                    child.state = State::Runnable;
                    started = true;
                    line.push_str(&format!(" grant={grant}"));
                }
                pexec.regs.gpr[0] = status::OK;
                line.push_str(" status=0");
            }
            Pending::Get(t) => {
                let opts = t.options();
                let mut code = status::OK;
                if opts.contains(Options::MERGE) {
                    match &child.snapshot {
                        None => code = status::ENOSNAP,
                        Some(snap) => {
                            let report = merge_region(
                                &mut pexec.space,
                                &cexec.space,
                                snap,
                                t.local,
                                t.remote,
                                t.len,
                                share,
                            );
                            let n = report.conflicts.len();
                            let (buf, cap) = conflict_buffer(&t);
                            for (i, a) in report.conflicts.iter().take(cap as usize).enumerate() {
                                pexec.space.write_u32(buf + 4 * i as u32, *a);
                            }
                            pexec.regs.gpr[4] = n as u32;
                            if n > 0 {
                                code = status::ECONFLICT;
                            }
                            line.push_str(&format!(" conflicts={n}"));
                        }
                    }
                } else {
                    pexec
                        .space
                        .copy_from(&cexec.space, t.remote, t.local, t.len as u64, share);
                }
                if code != status::ENOSNAP && opts.contains(Options::COPY_REGS) {
                    let reason = match &child.state {
                        State::Stopped(r) => r.as_ref(),
                        _ => None,
                    };
                    let (kind, detail) = stop_code(reason);
                    let regs = &mut pexec.regs.gpr;
                    regs[1] = kind;
                    regs[2] = detail;
                    regs[3] = cexec.since_start as u32;
                    line.push_str(&format!(" stop={kind}:{detail}"));
                }
                pexec.regs.gpr[0] = code;
                line.push_str(&format!(" status={code}"));
            }
        }
        self.procs[cpid].exec = Some(cexec);
        if started {
            self.queues[worker].push_back(cpid);
        }
        pexec.events.push(line);
        if let Some(before) = before {
            let after = self.fingerprints(pid, cpid);
            if let Some(((p, _), _)) = before
                .iter()
                .zip(&after)
                .find(|((_, x), (_, y))| x.is_some() && y.is_some() && x != y)
            {
                return Err(KernelError::Isolation(format!(
                    "{} changed during a call between {} and {}",
                    self.procs[*p].path, self.procs[pid].path, self.procs[cpid].path
                )));
            }
        }
        Ok(())
    }

    /// Records that `pid` stopped and completes a parent waiting on it.
    pub fn stop(
        &mut self,
        pid: Pid,
        mut exec: Exec,
        reason: StopReason,
        worker: usize,
    ) -> Result<(), KernelError> {
        exec.events
            .push(format!("STOP {reason} retired={}", exec.since_start));
        let p = &mut self.procs[pid];
        p.state = State::Stopped(Some(reason));
        p.exec = Some(exec);
        p.refund_pending = true;
        let Some(ppid) = p.parent else {
            return Ok(());
        };
        let index = p.index;
        let pending = match self.procs[ppid].state {
            State::Waiting(pending) if pending.transfer().child == index => pending,
            _ => return Ok(()),
        };
        let mut pexec = self.procs[ppid].exec.take().expect("waiting parent is resident");
        let r = self.perform(ppid, &mut pexec, pid, pending, worker);
        let parent = &mut self.procs[ppid];
        parent.exec = Some(pexec);
        parent.state = State::Runnable;
        self.queues[worker].push_back(ppid);
        r
    }

    pub fn park(&mut self, pid: Pid, exec: Exec, state: State, worker: usize) {
        let p = &mut self.procs[pid];
        p.exec = Some(exec);
        if matches!(state, State::Runnable) {
            self.queues[worker].push_back(pid);
        }
        p.state = state;
    }
}

/// Final state of one process.
#[derive(Debug, Clone)]
pub struct ProcessState {
    pub path: ProcessPath,
    pub regs: Registers,
    pub space: AddressSpace,
    /// `None` for a child that was created but never started.
    pub status: Option<StopReason>,
    pub snapshot: Option<AddressSpace>,
    /// Fuel still held, not yet refunded to the parent.
    pub fuel_left: u64,
    pub fuel: FuelStats,
}

/// Everything observable about a finished guest.
#[derive(Debug, Clone)]
pub struct Terminal {
    /// Every process, in path order; the root is first.
    pub processes: Vec<ProcessState>,
    /// Per-process syscall events concatenated in path order.
    pub log: Vec<String>,
}

impl Terminal {
    pub fn root(&self) -> &ProcessState {
        &self.processes[0]
    }

    pub fn find(&self, path: &ProcessPath) -> Option<&ProcessState> {
        self.processes
            .binary_search_by(|p| p.path.cmp(path))
            .ok()
            .map(|i| &self.processes[i])
    }

    pub fn total_retired(&self) -> u64 {
        self.processes.iter().map(|p| p.fuel.retired).sum()
    }

    /// Digest of every process's registers, memory, status, snapshot and
    /// fuel, plus the event log.
    pub fn state_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.processes {
            h.update(p.path.to_string().as_bytes());
            h.update([0]);
            for r in p.regs.gpr {
                h.update(r.to_le_bytes());
            }
            h.update(p.regs.pc.to_le_bytes());
            let (kind, detail) = stop_code(p.status.as_ref());
            h.update(kind.to_le_bytes());
            h.update(detail.to_le_bytes());
            h.update(p.fuel_left.to_le_bytes());
            for v in [
                p.fuel.granted,
                p.fuel.retired,
                p.fuel.delegated,
                p.fuel.refunds_in,
                p.fuel.refunds_out,
            ] {
                h.update(v.to_le_bytes());
            }
            h.update(p.space.content_hash());
            match &p.snapshot {
                Some(s) => h.update(s.content_hash()),
                None => h.update([0u8; 32]),
            }
        }
        for line in &self.log {
            h.update(line.as_bytes());
            h.update([b'\n']);
        }
        h.finalize().into()
    }
}

/// A guest ready to run: program, initial memory, fuel budget and kernel
/// configuration.
#[derive(Debug, Clone)]
pub struct Guest {
    pub program: GuestProgram,
    pub initial: AddressSpace,
    pub fuel: u64,
    pub config: KernelConfig,
}

impl Guest {
    pub fn new(program: GuestProgram, fuel: u64) -> Guest {
        Guest {
            program,
            initial: AddressSpace::new(),
            fuel,
            config: KernelConfig::default(),
        }
    }

    pub fn with_initial(mut self, initial: AddressSpace) -> Guest {
        self.initial = initial;
        self
    }

    pub fn with_config(mut self, config: KernelConfig) -> Guest {
        self.config = config;
        self
    }

    fn root_exec(&self) -> Exec {
        let mut space = AddressSpace::new();
        self.program.load_into(&mut space);
        for (pn, page) in self.initial.pages() {
            space.set_page(pn, Some(Arc::clone(page)));
        }
        if !self.config.cow {
            space = space.deep_clone();
        }
        let mut exec = Exec::empty();
        exec.regs.pc = self.program.entry;
        exec.space = space;
        exec.stats.granted = self.fuel;
        if self.config.mutation == Some(Mutation::SharedFuelCounter) {
            exec.pool = Some(Arc::new(AtomicU64::new(self.fuel)));
        } else {
            exec.fuel = self.fuel;
        }
        exec
    }

    /// Runs the guest until no process can make progress.
    pub fn run(&self, opts: &ScheduleOptions) -> Result<Terminal, KernelError> {
        self.program.validate()?;
        let workers = opts.workers.max(1);
        let table = Table::new(self.root_exec(), self.config.clone(), workers);
        let table = sched::run(table, opts, workers)?;
        finish(table)
    }
}

fn finish(table: Table) -> Result<Terminal, KernelError> {
    if let Some(e) = table.error {
        return Err(e);
    }
    let mut procs: Vec<Proc> = table.procs;
    if !matches!(procs[0].state, State::Stopped(Some(_))) {
        return Err(KernelError::Deadlock(match &procs[0].state {
            State::Waiting(p) => format!("waiting on child {}", p.transfer().child),
            State::Runnable | State::Running => "runnable".to_string(),
            State::Stopped(_) => "never started".to_string(),
        }));
    }
    procs.sort_by(|a, b| a.path.cmp(&b.path));
    let mut processes = Vec::with_capacity(procs.len());
    let mut log = Vec::new();
    for p in procs {
        let status = match p.state {
            State::Stopped(r) => r,
            _ => Some(StopReason::Forced),
        };
        let e = p.exec.expect("quiescent process is resident");
        log.extend(e.events.iter().map(|l| format!("{} {l}", p.path)));
        let fuel_left = e.fuel
            + e.pool
                .as_ref()
                .filter(|_| p.parent.is_none())
                .map_or(0, |a| a.load(std::sync::atomic::Ordering::SeqCst));
        processes.push(ProcessState {
            path: p.path,
            regs: e.regs,
            space: e.space,
            status,
            snapshot: p.snapshot,
            fuel_left,
            fuel: e.stats,
        });
    }
    Ok(Terminal { processes, log })
}
