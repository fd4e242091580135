//! The file API, operating directly on an image window in guest memory.
//!
//! A file descriptor is simply the file's table slot; there is no per-open
//! state. Every change to a file stamps it with a fresh version from the
//! image clock, which is what reconciliation uses to tell modified files
//! from untouched ones.

use bitflags::bitflags;

use super::{
    check_name, data_addr, read_entry, write_entry, EntryMeta, FsError, CLOCK_OFFSET,
    FLAG_APPEND, FLAG_CONFLICT, MAX_FILES, MAX_FILE_SIZE,
};
use crate::space::AddressSpace;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct OpenFlags: u32 {
        const CREATE = 1;
        /// On creation, make the file append-only.
        const APPEND = 2;
        const TRUNCATE = 4;
    }
}

pub struct FsMem<'a> {
    pub space: &'a mut AddressSpace,
    pub window: u32,
}

fn fits(addr: u32, len: u32) -> Result<(), FsError> {
    if addr as u64 + len as u64 > 1 << 32 {
        Err(FsError::Fault)
    } else {
        Ok(())
    }
}

impl<'a> FsMem<'a> {
    pub fn new(space: &'a mut AddressSpace, window: u32) -> FsMem<'a> {
        FsMem { space, window }
    }

    fn bump(&mut self) -> u32 {
        let a = self.window + CLOCK_OFFSET;
        let v = self.space.read_u32(a).wrapping_add(1);
        self.space.write_u32(a, v);
        v
    }

    fn entry(&self, slot: usize) -> Result<Option<EntryMeta>, FsError> {
        read_entry(self.space, self.window, slot)
    }

    fn lookup(&self, name: &str) -> Result<Option<(usize, EntryMeta)>, FsError> {
        for slot in 0..MAX_FILES {
            if let Some(e) = self.entry(slot)? {
                if e.name == name {
                    return Ok(Some((slot, e)));
                }
            }
        }
        Ok(None)
    }

    fn usable(&self, fd: u32) -> Result<(usize, EntryMeta), FsError> {
        let slot = fd as usize;
        if slot >= MAX_FILES {
            return Err(FsError::BadFd);
        }
        let e = self.entry(slot)?.ok_or(FsError::BadFd)?;
        if e.conflict() {
            return Err(FsError::Conflict);
        }
        Ok((slot, e))
    }

    fn set(&mut self, slot: usize, e: Option<&EntryMeta>) {
        write_entry(self.space, self.window, slot, e);
    }

    pub fn open(&mut self, name: &[u8], flags: OpenFlags) -> Result<u32, FsError> {
        if !OpenFlags::all().contains(flags) {
            return Err(FsError::Invalid);
        }
        let name = check_name(name)?.to_string();
        if let Some((slot, mut e)) = self.lookup(&name)? {
            if e.conflict() {
                return Err(FsError::Conflict);
            }
            if flags.contains(OpenFlags::TRUNCATE) && e.length > 0 {
                if e.append_only() {
                    return Err(FsError::AppendOnly);
                }
                self.space
                    .zero_range(data_addr(self.window, slot), e.length as u64);
                e.length = 0;
                e.version = self.bump();
                self.set(slot, Some(&e));
            }
            return Ok(slot as u32);
        }
        if !flags.contains(OpenFlags::CREATE) {
            return Err(FsError::NotFound);
        }
        let mut free = None;
        for slot in 0..MAX_FILES {
            if self.entry(slot)?.is_none() {
                free = Some(slot);
                break;
            }
        }
        let slot = free.ok_or(FsError::TableFull)?;
        let e = EntryMeta {
            name,
            length: 0,
            version: self.bump(),
            flags: if flags.contains(OpenFlags::APPEND) {
                FLAG_APPEND
            } else {
                0
            },
        };
        self.set(slot, Some(&e));
        Ok(slot as u32)
    }

    pub fn read(&mut self, fd: u32, buf: u32, len: u32, offset: u32) -> Result<u32, FsError> {
        let (slot, e) = self.usable(fd)?;
        fits(buf, len)?;
        let n = e.length.saturating_sub(offset).min(len);
        if n > 0 {
            let bytes = self
                .space
                .read_vec(data_addr(self.window, slot) + offset, n as usize);
            self.space.write_bytes(buf, &bytes);
        }
        Ok(n)
    }

    fn put_bytes(&mut self, slot: usize, mut e: EntryMeta, buf: u32, len: u32, at: u32) -> Result<u32, FsError> {
        fits(buf, len)?;
        if at as u64 + len as u64 > MAX_FILE_SIZE as u64 {
            return Err(FsError::FileTooBig);
        }
        if len == 0 {
            return Ok(0);
        }
        let bytes = self.space.read_vec(buf, len as usize);
        self.space
            .write_bytes(data_addr(self.window, slot) + at, &bytes);
        e.length = e.length.max(at + len);
        e.version = self.bump();
        self.set(slot, Some(&e));
        Ok(len)
    }

    /// Writes at `offset`. Append-only files reject this; use [`append`].
    ///
    /// [`append`]: FsMem::append
    pub fn write(&mut self, fd: u32, buf: u32, len: u32, offset: u32) -> Result<u32, FsError> {
        let (slot, e) = self.usable(fd)?;
        if e.append_only() {
            return Err(FsError::AppendOnly);
        }
        self.put_bytes(slot, e, buf, len, offset)
    }

    pub fn append(&mut self, fd: u32, buf: u32, len: u32) -> Result<u32, FsError> {
        let (slot, e) = self.usable(fd)?;
        let at = e.length;
        self.put_bytes(slot, e, buf, len, at)
    }

    pub fn size(&self, fd: u32) -> Result<u32, FsError> {
        Ok(self.usable(fd)?.1.length)
    }

    pub fn close(&self, fd: u32) -> Result<u32, FsError> {
        self.usable(fd).map(|_| 0)
    }

    pub fn delete(&mut self, name: &[u8]) -> Result<u32, FsError> {
        let name = check_name(name)?;
        let (slot, e) = self.lookup(name)?.ok_or(FsError::NotFound)?;
        if e.conflict() {
            return Err(FsError::Conflict);
        }
        self.space
            .zero_range(data_addr(self.window, slot), e.length as u64);
        self.set(slot, None);
        self.bump();
        Ok(0)
    }

    /// Clears a conflict flag, keeping the current content.
    pub fn clear_conflict(&mut self, name: &[u8]) -> Result<u32, FsError> {
        let name = check_name(name)?;
        let (slot, mut e) = self.lookup(name)?.ok_or(FsError::NotFound)?;
        if !e.conflict() {
            return Err(FsError::Invalid);
        }
        e.flags &= !FLAG_CONFLICT;
        self.set(slot, Some(&e));
        Ok(0)
    }
}
