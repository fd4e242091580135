//! The guest runtime: memory layout, library services and the assembly
//! prelude that gives guest programs fork/wait, threads, exec and files on
//! top of the three kernel calls.
//!
//! Everything here runs inside the calling process. Services are ordinary
//! functions of that process's registers and memory, so they add nothing
//! the kernel has to make deterministic.

pub mod programs;
mod services;

use crate::fs::{FileImage, FsError, WINDOW_SIZE};
use crate::kernel::{Guest, KernelConfig, ProcessState};
use crate::space::AddressSpace;
use crate::vm::{assemble, AsmError, GuestProgram, StopReason};
use sha2::{Digest, Sha256};

pub use services::RuntimeServices;

/// Program code and data live below this address.
pub const USER_END: u32 = 0x2000_0000;
/// Runtime metadata: fork flag, slot bitmap, register save area and the
/// word-conflict buffer.
pub const META: u32 = 0x2000_0000;
pub const META_FLAG: u32 = META;
pub const META_SLOTS: u32 = META + 0x08;
pub const META_SAVE: u32 = META + 0x100;
pub const META_CONFLICTS: u32 = META + 0x400;
pub const CONFLICT_CAP: u32 = 256;
/// Per-slot copies of the file table taken at fork.
pub const BASES: u32 = 0x2001_0000;
pub const BASE_STRIDE: u32 = 0x5000;
pub const MAX_SLOTS: u32 = 64;
pub const ARGS: u32 = 0x2020_0000;
pub const ARGS_MAX: u32 = 0x1_0000;
/// Stack regions: region 0 is the main stack, slot `s` uses region `s + 1`.
pub const STACKS: u32 = 0x2100_0000;
pub const STACK_SIZE: u32 = 0x1_0000;
pub const RUNTIME_END: u32 = STACKS + (MAX_SLOTS + 1) * STACK_SIZE;
pub const FS_BASE: u32 = 0x3000_0000;
/// Everything a fork copies: user memory, runtime state and the files.
pub const CLONE_LEN: u32 = FS_BASE + WINDOW_SIZE;
/// Where a child's file window is pulled in for reconciliation.
pub const PEER: u32 = 0x8000_0000;

/// Service ids for `SYS` selector 3.
pub mod svc {
    pub const SLOT_ALLOC: u32 = 0;
    pub const SLOT_CHECK: u32 = 1;
    pub const CAPTURE_BASE: u32 = 2;
    pub const RECONCILE: u32 = 3;
    pub const CHILD_INIT: u32 = 4;
    pub const EXEC: u32 = 5;
    pub const FS_OPEN: u32 = 16;
    pub const FS_READ: u32 = 17;
    pub const FS_WRITE: u32 = 18;
    pub const FS_APPEND: u32 = 19;
    pub const FS_CLOSE: u32 = 20;
    pub const FS_SIZE: u32 = 21;
    pub const FS_DELETE: u32 = 22;
    pub const FS_CLEAR_CONFLICT: u32 = 23;
}

const PRELUDE: &str = include_str!("../../guests/prelude.s");

fn header() -> String {
    use crate::vm::abi::{Options, SYS_GET, SYS_PUT, SYS_RET, SYS_SERVICE};
    let consts: &[(&str, u32)] = &[
        ("SYS_PUT", SYS_PUT),
        ("SYS_GET", SYS_GET),
        ("SYS_RET", SYS_RET),
        ("SYS_SVC", SYS_SERVICE),
        ("OPT_COPY_REGS", Options::COPY_REGS.bits()),
        ("OPT_SNAP", Options::SNAP.bits()),
        ("OPT_START", Options::START.bits()),
        ("OPT_MERGE", Options::MERGE.bits()),
        ("OPT_ZERO", Options::ZERO.bits()),
        ("USER_END", USER_END),
        ("META_FLAG", META_FLAG),
        ("META_SAVE", META_SAVE),
        ("CONFLICTS", META_CONFLICTS),
        ("CONFLICT_CAP", CONFLICT_CAP),
        ("ARGS", ARGS),
        ("STACKS", STACKS),
        ("STACK_SIZE", STACK_SIZE),
        ("FS_BASE", FS_BASE),
        ("FS_SIZE", WINDOW_SIZE),
        ("CLONE_LEN", CLONE_LEN),
        ("PEER", PEER),
        ("SVC_SLOT_ALLOC", svc::SLOT_ALLOC),
        ("SVC_SLOT_CHECK", svc::SLOT_CHECK),
        ("SVC_CAPTURE_BASE", svc::CAPTURE_BASE),
        ("SVC_RECONCILE", svc::RECONCILE),
        ("SVC_CHILD_INIT", svc::CHILD_INIT),
        ("SVC_EXEC", svc::EXEC),
        ("SVC_FS_OPEN", svc::FS_OPEN),
        ("SVC_FS_READ", svc::FS_READ),
        ("SVC_FS_WRITE", svc::FS_WRITE),
        ("SVC_FS_APPEND", svc::FS_APPEND),
        ("SVC_FS_CLOSE", svc::FS_CLOSE),
        ("SVC_FS_SIZE", svc::FS_SIZE),
        ("SVC_FS_DELETE", svc::FS_DELETE),
        ("SVC_FS_CLEAR_CONFLICT", svc::FS_CLEAR_CONFLICT),
        ("O_CREAT", 1),
        ("O_APPEND", 2),
        ("O_TRUNC", 4),
    ];
    consts
        .iter()
        .map(|(n, v)| format!(".equ {n}, {v:#x}\n"))
        .collect()
}

/// Assembles `source` together with the runtime prelude. The source must
/// define `main`, which receives the argument block in `r0`/`r1` and whose
/// return value becomes the exit code. Error lines refer to `source`.
pub fn link(source: &str) -> Result<GuestProgram, AsmError> {
    let header = header();
    let skip = header.lines().count();
    let user = source.lines().count();
    let text = format!("{header}{source}\n.text\n.align 4\n{PRELUDE}");
    assemble(&text).map_err(|mut e| {
        if e.line > skip && e.line <= skip + user {
            e.line -= skip;
        }
        e
    })
}

/// A guest whose root starts with `files` in its file window and the
/// runtime services installed.
pub fn boot(program: GuestProgram, files: &FileImage, fuel: u64) -> Guest {
    let mut initial = AddressSpace::new();
    files.store(&mut initial, FS_BASE);
    Guest::new(program, fuel)
        .with_initial(initial)
        .with_config(runtime_config())
}

/// Kernel configuration with the runtime services installed.
pub fn runtime_config() -> KernelConfig {
    KernelConfig {
        services: Some(std::sync::Arc::new(RuntimeServices)),
        ..KernelConfig::default()
    }
}

/// The files a process ended with.
pub fn files_of(process: &ProcessState) -> Result<FileImage, FsError> {
    FileImage::load(&process.space, FS_BASE)
}

/// One comparable fingerprint of a run: how the root stopped, the files it
/// ended with and the event log.
pub fn output_hash(status: &StopReason, files: &FileImage, log: &[String]) -> [u8; 32] {
    let (kind, detail) = crate::kernel::stop_code(Some(status));
    let mut h = Sha256::new();
    h.update(kind.to_le_bytes());
    h.update(detail.to_le_bytes());
    h.update(files.canonical_bytes());
    for line in log {
        h.update(line.as_bytes());
        h.update([b'\n']);
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_regions_do_not_overlap() {
        assert!(META_CONFLICTS + 4 * CONFLICT_CAP <= BASES);
        assert!(BASES + MAX_SLOTS * BASE_STRIDE <= ARGS);
        assert!(BASE_STRIDE >= crate::fs::TABLE_SIZE);
        assert!(ARGS + ARGS_MAX <= STACKS);
        assert!(RUNTIME_END <= FS_BASE);
        assert!(CLONE_LEN <= PEER);
        assert!(PEER as u64 + WINDOW_SIZE as u64 <= 1 << 32);
    }

    #[test]
    fn link_reports_user_lines() {
        let e = link("main:\n    ret\n    bogus r1\n").unwrap_err();
        assert_eq!(e.line, 3);
    }
}
