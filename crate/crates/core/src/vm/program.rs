//! The `DVM1` program container.
//!
//! ```text
//! "DVM1" | entry pc (u32 LE) | code length (u32 LE) | code bytes
//!        | { address (u32 LE) | length (u32 LE) | bytes }*
//! ```
//!
//! Code is loaded at [`CODE_BASE`]; each initial-data triple is written at
//! its absolute address after the code. The container ends after the last
//! complete triple.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::space::AddressSpace;

pub const MAGIC: &[u8; 4] = b"DVM1";
/// Load address of the code section.
pub const CODE_BASE: u32 = 0x1000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("bad magic")]
    BadMagic,
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("code length {0} is not a multiple of 4")]
    UnalignedCode(u32),
    #[error("entry pc {0:#x} is misaligned")]
    UnalignedEntry(u32),
    #[error("segment at {addr:#x} with length {len} exceeds the address space")]
    SegmentOverflow { addr: u32, len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataSegment {
    pub addr: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GuestProgram {
    pub entry: u32,
    pub code: Vec<u8>,
    pub data: Vec<DataSegment>,
}

fn check_segment(addr: u32, len: usize) -> Result<(), ProgramError> {
    if addr as u64 + len as u64 > 1 << 32 {
        return Err(ProgramError::SegmentOverflow {
            addr,
            len: len as u64,
        });
    }
    Ok(())
}

impl GuestProgram {
    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.code.len() % 4 != 0 {
            return Err(ProgramError::UnalignedCode(self.code.len() as u32));
        }
        if self.entry % 4 != 0 {
            return Err(ProgramError::UnalignedEntry(self.entry));
        }
        check_segment(CODE_BASE, self.code.len())?;
        for seg in &self.data {
            check_segment(seg.addr, seg.bytes.len())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.code.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.entry.to_le_bytes());
        out.extend_from_slice(&(self.code.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.code);
        for seg in &self.data {
            out.extend_from_slice(&seg.addr.to_le_bytes());
            out.extend_from_slice(&(seg.bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&seg.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GuestProgram, ProgramError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ProgramError> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or(ProgramError::Truncated(bytes.len()))?;
            *pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
        if take(&mut pos, 4)? != MAGIC {
            return Err(ProgramError::BadMagic);
        }
        let entry = u32_at(take(&mut pos, 4)?);
        let code_len = u32_at(take(&mut pos, 4)?);
        let code = take(&mut pos, code_len as usize)?.to_vec();
        let mut data = Vec::new();
        while pos < bytes.len() {
            let addr = u32_at(take(&mut pos, 4)?);
            let len = u32_at(take(&mut pos, 4)?);
            let bytes = take(&mut pos, len as usize)?.to_vec();
            data.push(DataSegment { addr, bytes });
        }
        let prog = GuestProgram { entry, code, data };
        prog.validate()?;
        Ok(prog)
    }

    /// Writes code and initial data into `space`.
    pub fn load_into(&self, space: &mut AddressSpace) {
        space.write_bytes(CODE_BASE, &self.code);
        for seg in &self.data {
            space.write_bytes(seg.addr, &seg.bytes);
        }
    }

    pub fn size(&self) -> usize {
        12 + self.code.len() + self.data.iter().map(|s| 8 + s.bytes.len()).sum::<usize>()
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}
