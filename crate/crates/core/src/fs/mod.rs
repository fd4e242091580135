//! The file system image a process keeps in its own memory.
//!
//! Byte layout of an image window starting at `W`:
//!
//! ```text
//! W + 80*i          entry i, i in 0..256:
//!   +0   name       63 bytes + NUL (an empty name marks a free entry)
//!   +64  length     u32 LE
//!   +68  version    u32 LE
//!   +72  flags      u32 LE (bit 0 append-only, bit 1 conflict)
//!   +76  data off   u32 LE, always i * 4 MiB
//! W + 0x5000        clock: u32 LE, the last version number handed out
//! W + 0x10_0000     data area; file i occupies [i * 4 MiB, (i+1) * 4 MiB)
//! ```
//!
//! Bytes beyond a file's length are always zero, so two images with the
//! same files compare equal word for word.

pub mod ops;
pub mod reconcile;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::space::AddressSpace;

pub use ops::{FsMem, OpenFlags};
pub use reconcile::{clear_conflict, reconcile_fs, Outcome, ReconciliationReport, VersionTable};

pub const MAX_FILES: usize = 256;
pub const MAX_FILE_SIZE: u32 = 4 << 20;
pub const NAME_MAX: usize = 63;
pub const ENTRY_SIZE: u32 = 80;
pub const TABLE_SIZE: u32 = ENTRY_SIZE * MAX_FILES as u32;
pub const CLOCK_OFFSET: u32 = TABLE_SIZE;
pub const DATA_OFFSET: u32 = 0x10_0000;
/// Size of a whole image window.
pub const WINDOW_SIZE: u32 = DATA_OFFSET + MAX_FILES as u32 * MAX_FILE_SIZE;

pub const FLAG_APPEND: u32 = 1;
pub const FLAG_CONFLICT: u32 = 2;

/// Errors of the guest file API. Guests see `-(errno)` in `r0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FsError {
    #[error("operation not permitted on an append-only file")]
    AppendOnly,
    #[error("no such file")]
    NotFound,
    #[error("bad file descriptor")]
    BadFd,
    #[error("bad guest buffer")]
    Fault,
    #[error("invalid argument")]
    Invalid,
    #[error("file would exceed 4 MiB")]
    FileTooBig,
    #[error("file table full")]
    TableFull,
    #[error("file name longer than 63 bytes")]
    NameTooLong,
    #[error("file is flagged as conflicting")]
    Conflict,
    #[error("malformed file table")]
    Corrupt,
    #[error("not a loadable program")]
    NotExecutable,
}

impl FsError {
    pub fn errno(self) -> u32 {
        match self {
            FsError::AppendOnly => 1,
            FsError::NotFound => 2,
            FsError::BadFd => 9,
            FsError::Fault => 14,
            FsError::Invalid => 22,
            FsError::FileTooBig => 27,
            FsError::TableFull => 28,
            FsError::NameTooLong => 36,
            FsError::Conflict => 200,
            FsError::Corrupt => 201,
            FsError::NotExecutable => 8,
        }
    }

    /// The value a guest receives in `r0`.
    pub fn to_guest(self) -> u32 {
        self.errno().wrapping_neg()
    }

    pub fn from_guest(v: u32) -> Option<FsError> {
        let e = v.wrapping_neg();
        [
            FsError::AppendOnly,
            FsError::NotFound,
            FsError::BadFd,
            FsError::Fault,
            FsError::Invalid,
            FsError::FileTooBig,
            FsError::TableFull,
            FsError::NameTooLong,
            FsError::Conflict,
            FsError::Corrupt,
            FsError::NotExecutable,
        ]
        .into_iter()
        .find(|x| x.errno() == e)
    }
}

/// One table entry without its data.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EntryMeta {
    pub name: String,
    pub length: u32,
    pub version: u32,
    pub flags: u32,
}

impl EntryMeta {
    pub fn append_only(&self) -> bool {
        self.flags & FLAG_APPEND != 0
    }

    pub fn conflict(&self) -> bool {
        self.flags & FLAG_CONFLICT != 0
    }
}

pub(crate) fn check_name(name: &[u8]) -> Result<&str, FsError> {
    if name.is_empty() || name.contains(&0) {
        return Err(FsError::Invalid);
    }
    if name.len() > NAME_MAX {
        return Err(FsError::NameTooLong);
    }
    std::str::from_utf8(name).map_err(|_| FsError::Invalid)
}

pub(crate) fn entry_addr(window: u32, slot: usize) -> u32 {
    window + slot as u32 * ENTRY_SIZE
}

pub(crate) fn data_addr(window: u32, slot: usize) -> u32 {
    window + DATA_OFFSET + slot as u32 * MAX_FILE_SIZE
}

/// Reads entry `slot` of the table at `table`. `Ok(None)` is a free entry.
pub(crate) fn read_entry(
    space: &AddressSpace,
    table: u32,
    slot: usize,
) -> Result<Option<EntryMeta>, FsError> {
    let a = entry_addr(table, slot);
    let raw = space.read_vec(a, ENTRY_SIZE as usize);
    if raw[0] == 0 {
        return if raw.iter().all(|&b| b == 0) {
            Ok(None)
        } else {
            Err(FsError::Corrupt)
        };
    }
    let nul = raw[..64].iter().position(|&b| b == 0).ok_or(FsError::Corrupt)?;
    if raw[nul..64].iter().any(|&b| b != 0) {
        return Err(FsError::Corrupt);
    }
    let name = check_name(&raw[..nul]).map_err(|_| FsError::Corrupt)?;
    let word = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().unwrap());
    let (length, version, flags, off) = (word(64), word(68), word(72), word(76));
    if length > MAX_FILE_SIZE
        || flags & !(FLAG_APPEND | FLAG_CONFLICT) != 0
        || off != slot as u32 * MAX_FILE_SIZE
    {
        return Err(FsError::Corrupt);
    }
    Ok(Some(EntryMeta {
        name: name.to_string(),
        length,
        version,
        flags,
    }))
}

pub(crate) fn write_entry(space: &mut AddressSpace, table: u32, slot: usize, e: Option<&EntryMeta>) {
    let mut raw = [0u8; ENTRY_SIZE as usize];
    if let Some(e) = e {
        raw[..e.name.len()].copy_from_slice(e.name.as_bytes());
        raw[64..68].copy_from_slice(&e.length.to_le_bytes());
        raw[68..72].copy_from_slice(&e.version.to_le_bytes());
        raw[72..76].copy_from_slice(&e.flags.to_le_bytes());
        raw[76..80].copy_from_slice(&(slot as u32 * MAX_FILE_SIZE).to_le_bytes());
    }
    space.write_bytes(entry_addr(table, slot), &raw);
}

/// Reads a whole table, rejecting duplicate names.
pub(crate) fn read_table(space: &AddressSpace, table: u32) -> Result<Vec<Option<EntryMeta>>, FsError> {
    let mut out = Vec::with_capacity(MAX_FILES);
    let mut seen = std::collections::HashSet::new();
    for slot in 0..MAX_FILES {
        let e = read_entry(space, table, slot)?;
        if let Some(e) = &e {
            if !seen.insert(e.name.clone()) {
                return Err(FsError::Corrupt);
            }
        }
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FileEntry {
    pub meta: EntryMeta,
    pub data: Vec<u8>,
}

/// An owned copy of a file system image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FileImage {
    pub slots: Vec<Option<FileEntry>>,
    pub clock: u32,
}

impl Default for FileImage {
    fn default() -> Self {
        FileImage::new()
    }
}

impl FileImage {
    pub fn new() -> FileImage {
        FileImage {
            slots: vec![None; MAX_FILES],
            clock: 0,
        }
    }

    /// Builds an image holding `files`, in the given order.
    pub fn from_files<'a>(
        files: impl IntoIterator<Item = (&'a str, &'a [u8])>,
    ) -> Result<FileImage, FsError> {
        let mut img = FileImage::new();
        for (name, data) in files {
            img.put(name, data.to_vec(), 0)?;
        }
        Ok(img)
    }

    pub fn load(space: &AddressSpace, window: u32) -> Result<FileImage, FsError> {
        let table = read_table(space, window)?;
        let slots = table
            .into_iter()
            .enumerate()
            .map(|(slot, meta)| {
                meta.map(|meta| {
                    let data = space.read_vec(data_addr(window, slot), meta.length as usize);
                    FileEntry { meta, data }
                })
            })
            .collect();
        Ok(FileImage {
            slots,
            clock: space.read_u32(window + CLOCK_OFFSET),
        })
    }

    /// Writes the image into an empty window.
    pub fn store(&self, space: &mut AddressSpace, window: u32) {
        self.store_over(&FileImage::new(), space, window);
    }

    /// Writes the image into a window currently holding `old`, touching only
    /// entries that differ.
    pub fn store_over(&self, old: &FileImage, space: &mut AddressSpace, window: u32) {
        for slot in 0..MAX_FILES {
            let (o, n) = (&old.slots[slot], &self.slots[slot]);
            if o == n {
                continue;
            }
            let d = data_addr(window, slot);
            if let Some(o) = o {
                space.zero_range(d, o.data.len() as u64);
            }
            if let Some(n) = n {
                space.write_bytes(d, &n.data);
            }
            write_entry(space, window, slot, n.as_ref().map(|e| &e.meta));
        }
        space.write_u32(window + CLOCK_OFFSET, self.clock);
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.slots
            .iter()
            .position(|e| e.as_ref().is_some_and(|e| e.meta.name == name))
    }

    pub fn get(&self, name: &str) -> Option<&FileEntry> {
        self.slot_of(name).and_then(|s| self.slots[s].as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Files by name.
    pub fn files(&self) -> BTreeMap<&str, &FileEntry> {
        self.slots
            .iter()
            .flatten()
            .map(|e| (e.meta.name.as_str(), e))
            .collect()
    }

    pub fn next_version(&mut self) -> u32 {
        self.clock += 1;
        self.clock
    }

    /// Creates or replaces `name` with `data`, keeping its slot if present.
    pub fn put(&mut self, name: &str, data: Vec<u8>, flags: u32) -> Result<(), FsError> {
        check_name(name.as_bytes())?;
        if data.len() > MAX_FILE_SIZE as usize {
            return Err(FsError::FileTooBig);
        }
        let slot = match self.slot_of(name) {
            Some(s) => s,
            None => self
                .slots
                .iter()
                .position(Option::is_none)
                .ok_or(FsError::TableFull)?,
        };
        let version = self.next_version();
        self.slots[slot] = Some(FileEntry {
            meta: EntryMeta {
                name: name.to_string(),
                length: data.len() as u32,
                version,
                flags,
            },
            data,
        });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<FileEntry> {
        let slot = self.slot_of(name)?;
        self.clock += 1;
        self.slots[slot].take()
    }

    /// Version table as captured at a fork.
    pub fn versions(&self) -> VersionTable {
        VersionTable(
            self.slots
                .iter()
                .map(|e| e.as_ref().map(|e| e.meta.clone()))
                .collect(),
        )
    }

    /// Name-ordered serialization of names, flags and contents. Slots,
    /// versions and the clock are bookkeeping and are left out.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, e) in self.files() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&e.meta.flags.to_le_bytes());
            out.extend_from_slice(&(e.data.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn canonical_hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_bytes()).into()
    }

    /// Rebuilds an image from [`canonical_bytes`], placing files in name
    /// order.
    ///
    /// [`canonical_bytes`]: FileImage::canonical_bytes
    pub fn from_canonical(bytes: &[u8]) -> Result<FileImage, FsError> {
        let mut img = FileImage::new();
        let mut pos = 0usize;
        let read_u32 = |pos: &mut usize| -> Result<u32, FsError> {
            let b = bytes.get(*pos..*pos + 4).ok_or(FsError::Corrupt)?;
            *pos += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        while pos < bytes.len() {
            let n = read_u32(&mut pos)? as usize;
            let name = bytes.get(pos..pos + n).ok_or(FsError::Corrupt)?;
            pos += n;
            let name = std::str::from_utf8(name).map_err(|_| FsError::Corrupt)?.to_string();
            let flags = read_u32(&mut pos)?;
            let len = read_u32(&mut pos)? as usize;
            let data = bytes.get(pos..pos + len).ok_or(FsError::Corrupt)?.to_vec();
            pos += len;
            img.put(&name, data, flags)?;
        }
        Ok(img)
    }
}
