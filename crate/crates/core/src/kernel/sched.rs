//! Seeded work-stealing scheduler.
//!
//! Workers pick runnable processes, run them for a randomly sized slice
//! outside the table lock, and take the lock only to start, stop or
//! synchronize processes. The seed picks slice lengths, queue ends and
//! steal victims; none of it can influence the guest's final state.

use std::sync::atomic::Ordering;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::guest::{Exec, Outcome, Pending, Pid, State, Table};
use super::{KernelError, ScheduleOptions};
use crate::vm::abi::{status, SyscallRequest};
use crate::vm::{run_until_stop, StopReason};

struct Shared {
    table: Mutex<Table>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Table> {
        self.table.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Marks the run finished if a worker unwinds, so the others do not wait
/// forever for it.
struct PanicGuard<'a>(&'a Shared);

impl Drop for PanicGuard<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            let mut t = self.0.lock();
            t.finished = true;
            t.error.get_or_insert(KernelError::WorkerPanic);
            self.0.cv.notify_all();
        }
    }
}

pub(crate) fn run(table: Table, opts: &ScheduleOptions, workers: usize) -> Result<Table, KernelError> {
    let shared = Shared {
        table: Mutex::new(table),
        cv: Condvar::new(),
    };
    let panicked = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let shared = &shared;
                s.spawn(move || {
                    let _guard = PanicGuard(shared);
                    worker(shared, opts, w)
                })
            })
            .collect();
        handles.into_iter().fold(false, |acc, h| h.join().is_err() || acc)
    });
    let table = shared.table.into_inner().unwrap_or_else(|e| e.into_inner());
    if panicked {
        return Err(KernelError::WorkerPanic);
    }
    Ok(table)
}

fn worker_rng(seed: u64, w: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(w as u64);
    rng
}

fn fail(shared: &Shared, t: &mut Table, e: KernelError) {
    t.error.get_or_insert(e);
    t.finished = true;
    shared.cv.notify_all();
}

fn acquire(shared: &Shared, w: usize, rng: &mut ChaCha8Rng) -> Option<(Pid, Exec)> {
    let mut t = shared.lock();
    loop {
        if t.finished {
            return None;
        }
        if let Some(pid) = t.pick(w, rng) {
            t.running += 1;
            let p = &mut t.procs[pid];
            p.state = State::Running;
            let exec = p.exec.take().expect("runnable process is resident");
            return Some((pid, exec));
        }
        if t.running == 0 {
            t.finished = true;
            shared.cv.notify_all();
            return None;
        }
        t = shared.cv.wait(t).unwrap_or_else(|e| e.into_inner());
    }
}

/// Fuel for the next slice, taken from the process's own budget or from a
/// shared counter.
fn reserve(exec: &mut Exec, slice: u64) -> u64 {
    match &exec.pool {
        None => exec.fuel.min(slice),
        Some(pool) => {
            let mut cur = pool.load(Ordering::SeqCst);
            loop {
                let take = cur.min(slice);
                match pool.compare_exchange(cur, cur - take, Ordering::SeqCst, Ordering::SeqCst) {
                    Ok(_) => return take,
                    Err(actual) => cur = actual,
                }
            }
        }
    }
}

fn settle(exec: &mut Exec, reserved: u64, retired: u64) {
    exec.stats.retired += retired;
    exec.since_start += retired;
    match &exec.pool {
        None => exec.fuel -= retired,
        Some(pool) => {
            pool.fetch_add(reserved - retired, Ordering::SeqCst);
        }
    }
}

fn has_fuel(exec: &Exec) -> bool {
    match &exec.pool {
        None => exec.fuel > 0,
        Some(pool) => pool.load(Ordering::SeqCst) > 0,
    }
}

fn worker(shared: &Shared, opts: &ScheduleOptions, w: usize) {
    let mut rng = worker_rng(opts.seed, w);
    let (lo, hi) = (opts.slice.0.max(1), opts.slice.1.max(opts.slice.0.max(1)));
    let services = shared.lock().cfg.services.clone();
    while let Some((pid, mut exec)) = acquire(shared, w, &mut rng) {
        loop {
            if let Some(stall) = opts.stall {
                if rng.gen_bool(stall.probability.clamp(0.0, 1.0)) {
                    let max = stall.max.as_micros() as u64;
                    thread::sleep(Duration::from_micros(rng.gen_range(0..=max)));
                }
            }
            let slice = rng.gen_range(lo..=hi);
            let reserved = reserve(&mut exec, slice);
            let out = run_until_stop(&mut exec.regs, &mut exec.space, reserved);
            settle(&mut exec, reserved, out.retired);
            let stop = match out.stop {
                StopReason::FuelOut if reserved > 0 && has_fuel(&exec) => {
                    let mut t = shared.lock();
                    t.running -= 1;
                    t.park(pid, exec, State::Runnable, w);
                    shared.cv.notify_all();
                    break;
                }
                StopReason::FuelOut if reserved > 0 => {
                    // The slice ended exactly as the budget ran out; the next
                    // attempt reports FUELOUT without retiring anything.
                    continue;
                }
                StopReason::Syscall(SyscallRequest::Service { id, args }) => {
                    let r = match &services {
                        Some(s) => s.call(id, args, &mut exec.regs, &mut exec.space),
                        None => {
                            exec.regs.gpr[0] = status::EINVAL;
                            Ok(())
                        }
                    };
                    match r {
                        Ok(()) => continue,
                        Err(k) => StopReason::Except(k),
                    }
                }
                StopReason::Syscall(SyscallRequest::Invalid { selector }) => {
                    exec.regs.gpr[0] = status::EINVAL;
                    exec.events
                        .push(format!("SYS selector={selector} status={}", status::EINVAL));
                    continue;
                }
                StopReason::Syscall(SyscallRequest::Ret { code }) => StopReason::Halt(code),
                StopReason::Syscall(req @ (SyscallRequest::Put(_) | SyscallRequest::Get(_))) => {
                    let pending = match req {
                        SyscallRequest::Put(t) => Pending::Put(t),
                        SyscallRequest::Get(t) => Pending::Get(t),
                        _ => unreachable!(),
                    };
                    let mut t = shared.lock();
                    match t.transfer(pid, &mut exec, pending, w) {
                        Ok(Outcome::Continue) => {
                            shared.cv.notify_all();
                            continue;
                        }
                        Ok(Outcome::Wait) => {
                            t.running -= 1;
                            t.park(pid, exec, State::Waiting(pending), w);
                            shared.cv.notify_all();
                            break;
                        }
                        Err(e) => {
                            fail(shared, &mut t, e);
                            return;
                        }
                    }
                }
                other => other,
            };
            let mut t = shared.lock();
            t.running -= 1;
            if let Err(e) = t.stop(pid, exec, stop, w) {
                fail(shared, &mut t, e);
                return;
            }
            shared.cv.notify_all();
            break;
        }
    }
}
