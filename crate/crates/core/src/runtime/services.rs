use super::*;
use crate::fs::{reconcile_fs, FsMem, OpenFlags, VersionTable, NAME_MAX, TABLE_SIZE};
use crate::kernel::Services;
use crate::vm::{ExceptKind, Registers, CODE_BASE};

/// Library calls behind `SYS` selector 3. Results go to `r0`; failures are
/// negated errno values.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuntimeServices;

fn cstr(space: &AddressSpace, addr: u32) -> Result<Vec<u8>, FsError> {
    let mut out = Vec::new();
    for i in 0..=NAME_MAX as u32 {
        let a = addr.checked_add(i).ok_or(FsError::Fault)?;
        match space.read_u8(a) {
            0 => return Ok(out),
            b => out.push(b),
        }
    }
    Err(FsError::NameTooLong)
}

fn slot_bits(space: &AddressSpace) -> u64 {
    space.read_u32(META_SLOTS) as u64 | (space.read_u32(META_SLOTS + 4) as u64) << 32
}

fn set_slot_bits(space: &mut AddressSpace, bits: u64) {
    space.write_u32(META_SLOTS, bits as u32);
    space.write_u32(META_SLOTS + 4, (bits >> 32) as u32);
}

fn live_slot(space: &AddressSpace, slot: u32) -> Result<u32, FsError> {
    if slot < MAX_SLOTS && slot_bits(space) >> slot & 1 == 1 {
        Ok(slot)
    } else {
        Err(FsError::BadFd)
    }
}

fn base_addr(slot: u32) -> u32 {
    BASES + slot * BASE_STRIDE
}

/// Merges the child's file window (already pulled into `PEER`) into ours,
/// clears `PEER` and the base, and frees the slot. Returns the number of
/// conflicting files.
fn reconcile(space: &mut AddressSpace, slot: u32) -> Result<u32, FsError> {
    let slot = live_slot(space, slot)?;
    let merged = (|| {
        let base = VersionTable::load(space, base_addr(slot))?;
        let parent = FileImage::load(space, FS_BASE)?;
        let child = FileImage::load(space, PEER)?;
        let (merged, report) = reconcile_fs(&base, &parent, &child);
        merged.store_over(&parent, space, FS_BASE);
        Ok(report.conflicts() as u32)
    })();
    space.zero_range(PEER, WINDOW_SIZE as u64);
    space.zero_range(base_addr(slot), BASE_STRIDE as u64);
    set_slot_bits(space, slot_bits(space) & !(1 << slot));
    merged
}

/// Replaces the process image with the program stored in file `path`.
/// Files survive; user memory and runtime state start fresh.
fn exec(regs: &mut Registers, space: &mut AddressSpace, args: [u32; 6]) -> Result<u32, FsError> {
    let name = cstr(space, args[0])?;
    let (argv, argc) = (args[1], args[2]);
    if argc > ARGS_MAX || argv.checked_add(argc).is_none() {
        return Err(FsError::Invalid);
    }
    let image = FileImage::load(space, FS_BASE)?;
    let name = std::str::from_utf8(&name).map_err(|_| FsError::Invalid)?;
    let file = image.get(name).ok_or(FsError::NotFound)?;
    if file.meta.conflict() {
        return Err(FsError::Conflict);
    }
    let program = GuestProgram::from_bytes(&file.data).map_err(|_| FsError::NotExecutable)?;
    let inside = |addr: u32, len: usize| addr as u64 + len as u64 <= USER_END as u64;
    if !inside(CODE_BASE, program.code.len())
        || !inside(program.entry, 4)
        || !program.data.iter().all(|s| inside(s.addr, s.bytes.len()))
    {
        return Err(FsError::NotExecutable);
    }
    let block = space.read_vec(argv, argc as usize);
    space.zero_range(0, RUNTIME_END as u64);
    space.zero_range(PEER, WINDOW_SIZE as u64);
    program.load_into(space);
    space.write_bytes(ARGS, &block);
    *regs = Registers::default();
    regs.pc = program.entry;
    regs.gpr[1] = argc;
    Ok(ARGS)
}

impl RuntimeServices {
    fn dispatch(
        &self,
        id: u32,
        a: [u32; 6],
        regs: &mut Registers,
        space: &mut AddressSpace,
    ) -> Result<u32, FsError> {
        match id {
            svc::SLOT_ALLOC => {
                let bits = slot_bits(space);
                let free = (!bits).trailing_zeros();
                if free >= MAX_SLOTS {
                    return Ok(u32::MAX);
                }
                set_slot_bits(space, bits | 1 << free);
                Ok(free)
            }
            svc::SLOT_CHECK => live_slot(space, a[0]).map(|_| 0),
            svc::CAPTURE_BASE => {
                let slot = live_slot(space, a[0])?;
                let snapshot = space.clone();
                space.copy_from(&snapshot, FS_BASE, base_addr(slot), TABLE_SIZE as u64, true);
                Ok(0)
            }
            svc::RECONCILE => reconcile(space, a[0]),
            svc::CHILD_INIT => {
                space.zero_range(META, (META_SAVE - META) as u64);
                space.zero_range(META_CONFLICTS, 4 * CONFLICT_CAP as u64);
                space.zero_range(BASES, (MAX_SLOTS * BASE_STRIDE) as u64);
                Ok(0)
            }
            svc::EXEC => exec(regs, space, a),
            svc::FS_OPEN => {
                let name = cstr(space, a[0])?;
                let flags = OpenFlags::from_bits(a[1]).ok_or(FsError::Invalid)?;
                FsMem::new(space, FS_BASE).open(&name, flags)
            }
            svc::FS_READ => FsMem::new(space, FS_BASE).read(a[0], a[1], a[2], a[3]),
            svc::FS_WRITE => FsMem::new(space, FS_BASE).write(a[0], a[1], a[2], a[3]),
            svc::FS_APPEND => FsMem::new(space, FS_BASE).append(a[0], a[1], a[2]),
            svc::FS_CLOSE => FsMem::new(space, FS_BASE).close(a[0]),
            svc::FS_SIZE => FsMem::new(space, FS_BASE).size(a[0]),
            svc::FS_DELETE => {
                let name = cstr(space, a[0])?;
                FsMem::new(space, FS_BASE).delete(&name)
            }
            svc::FS_CLEAR_CONFLICT => {
                let name = cstr(space, a[0])?;
                FsMem::new(space, FS_BASE).clear_conflict(&name)
            }
            _ => Err(FsError::Invalid),
        }
    }
}

impl Services for RuntimeServices {
    fn call(
        &self,
        id: u32,
        args: [u32; 6],
        regs: &mut Registers,
        space: &mut AddressSpace,
    ) -> Result<(), ExceptKind> {
        let r = self.dispatch(id, args, regs, space);
        regs.gpr[0] = r.unwrap_or_else(FsError::to_guest);
        Ok(())
    }
}
