//! System-call ABI.
//!
//! `SYS` stops the process and hands the kernel a request decoded from the
//! register file: `r0` selects the call, `r1..r7` carry its arguments.
//!
//! | reg | PUT / GET          | RET  | SERVICE      |
//! |-----|--------------------|------|--------------|
//! | r0  | 0 / 1              | 2    | 3            |
//! | r1  | child index        | code | service id   |
//! | r2  | local address      |      | arg 0        |
//! | r3  | child address      |      | arg 1        |
//! | r4  | length in bytes    |      | arg 2        |
//! | r5  | option bits        |      | arg 3        |
//! | r6  | fuel limit, low ¹  |      | arg 4        |
//! | r7  | fuel limit, high ¹ |      | arg 5        |
//!
//! After a PUT or GET completes the kernel writes a [`status`] code to the
//! caller's `r0`. A GET with `COPY_REGS` also reports why the child stopped
//! in `r1` (a [`stop_kind`] value), the halt code or exception kind in `r2`
//! and the low word of the instructions the child retired since its last
//! start in `r3`. A GET with `MERGE` reports the number of conflicting words
//! in `r4`.
//!
//! ¹ GET has no fuel limit. There `r6` is the address of a buffer that
//! receives the conflicting parent addresses (0 for none) and `r7` its
//! capacity in words.

use bitflags::bitflags;

pub const SYS_PUT: u32 = 0;
pub const SYS_GET: u32 = 1;
pub const SYS_RET: u32 = 2;
pub const SYS_SERVICE: u32 = 3;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Options: u32 {
        const COPY_REGS = 1 << 0;
        const SNAP = 1 << 1;
        const START = 1 << 2;
        const MERGE = 1 << 3;
        const ZERO = 1 << 4;
    }
}

/// Status codes returned in `r0`.
pub mod status {
    pub const OK: u32 = 0;
    /// Unknown selector, unknown option bits, or an option not valid for the call.
    pub const EINVAL: u32 = 1;
    /// Child index is neither an existing child nor the next free index.
    pub const ECHILD: u32 = 2;
    /// Misaligned or wrapping address range.
    pub const ERANGE: u32 = 3;
    /// MERGE requested but the child has no reference snapshot.
    pub const ENOSNAP: u32 = 4;
    /// MERGE completed but some words were changed on both sides.
    pub const ECONFLICT: u32 = 5;
}

/// Stop-kind codes reported to a parent by GET with `COPY_REGS`.
pub mod stop_kind {
    pub const NEVER_RUN: u32 = 0;
    pub const HALT: u32 = 1;
    pub const EXCEPT: u32 = 2;
    pub const FUELOUT: u32 = 3;
    pub const FORCED: u32 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transfer {
    pub child: u32,
    pub local: u32,
    pub remote: u32,
    pub len: u32,
    /// Raw option bits, possibly including unknown ones.
    pub options: u32,
    pub limit: u64,
}

impl Transfer {
    pub fn options(&self) -> Options {
        Options::from_bits_retain(self.options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyscallRequest {
    Put(Transfer),
    Get(Transfer),
    Ret { code: u32 },
    Service { id: u32, args: [u32; 6] },
    Invalid { selector: u32 },
}

impl SyscallRequest {
    pub fn decode(r: &[u32; 8]) -> SyscallRequest {
        let transfer = || Transfer {
            child: r[1],
            local: r[2],
            remote: r[3],
            len: r[4],
            options: r[5],
            limit: r[6] as u64 | (r[7] as u64) << 32,
        };
        match r[0] {
            SYS_PUT => SyscallRequest::Put(transfer()),
            SYS_GET => SyscallRequest::Get(transfer()),
            SYS_RET => SyscallRequest::Ret { code: r[1] },
            SYS_SERVICE => SyscallRequest::Service {
                id: r[1],
                args: [r[2], r[3], r[4], r[5], r[6], r[7]],
            },
            selector => SyscallRequest::Invalid { selector },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_put_fields_from_registers() {
        let r = [SYS_PUT, 3, 0x1000, 0x2000, 64, 0b110, 500, 1];
        match SyscallRequest::decode(&r) {
            SyscallRequest::Put(t) => {
                assert_eq!(t.child, 3);
                assert_eq!(t.local, 0x1000);
                assert_eq!(t.remote, 0x2000);
                assert_eq!(t.len, 64);
                assert_eq!(t.options(), Options::SNAP | Options::START);
                assert_eq!(t.limit, 500 | 1 << 32);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            SyscallRequest::decode(&[9, 0, 0, 0, 0, 0, 0, 0]),
            SyscallRequest::Invalid { selector: 9 }
        );
    }
}
