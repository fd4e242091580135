//! The interpreter: exact instruction counting and trap delivery.

use std::fmt;

use super::abi::SyscallRequest;
use super::isa::{Instruction, Operand, Target};
use crate::space::AddressSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Registers {
    pub gpr: [u32; 8],
    pub pc: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExceptKind {
    DivZero,
    Illegal,
    Misalign,
    Fault,
}

impl ExceptKind {
    pub fn code(self) -> u32 {
        match self {
            ExceptKind::DivZero => 1,
            ExceptKind::Illegal => 2,
            ExceptKind::Misalign => 3,
            ExceptKind::Fault => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExceptKind::DivZero => "DIVZERO",
            ExceptKind::Illegal => "ILLEGAL",
            ExceptKind::Misalign => "MISALIGN",
            ExceptKind::Fault => "FAULT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    Syscall(SyscallRequest),
    Halt(u32),
    Except(ExceptKind),
    FuelOut,
    Forced,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::Syscall(req) => write!(f, "SYSCALL({req:?})"),
            StopReason::Halt(code) => write!(f, "HALT({code})"),
            StopReason::Except(kind) => write!(f, "EXCEPT({})", kind.name()),
            StopReason::FuelOut => f.write_str("FUELOUT"),
            StopReason::Forced => f.write_str("FORCED"),
        }
    }
}

/// Result of [`run_until_stop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub retired: u64,
    pub stop: StopReason,
}

#[inline]
fn rel_target(pc: u32, offset: i16) -> Option<u32> {
    let t = pc as i64 + 4 + offset as i64 * 4;
    u32::try_from(t).ok()
}

#[inline]
fn effective(base: u32, offset: i16) -> Result<u32, ExceptKind> {
    let ea = u32::try_from(base as i64 + offset as i64).map_err(|_| ExceptKind::Fault)?;
    if ea & 3 != 0 {
        return Err(ExceptKind::Misalign);
    }
    Ok(ea)
}

#[inline]
fn indirect(value: u32) -> Result<u32, ExceptKind> {
    if value & 3 != 0 {
        Err(ExceptKind::Misalign)
    } else {
        Ok(value)
    }
}

/// Executes the instruction at `pc` and reports whether it stopped the
/// process. A trapping instruction leaves registers and memory untouched.
#[inline]
fn execute(regs: &mut Registers, mem: &mut AddressSpace) -> Option<StopReason> {
    let pc = regs.pc;
    let inst = match Instruction::decode(mem.read_u32(pc)) {
        Some(i) => i,
        None => return Some(StopReason::Except(ExceptKind::Illegal)),
    };
    let next = match pc.checked_add(4) {
        Some(n) => n,
        None => return Some(StopReason::Except(ExceptKind::Fault)),
    };
    let r = &mut regs.gpr;
    let trap = |k| Some(StopReason::Except(k));
    match inst {
        Instruction::LoadI { rd, imm, high } => {
            let rd = rd as usize;
            r[rd] = if high {
                (r[rd] & 0xFFFF) | (imm as u32) << 16
            } else {
                imm as u32
            };
        }
        Instruction::Load { rd, base, offset } => match effective(r[base as usize], offset) {
            Ok(ea) => r[rd as usize] = mem.read_u32(ea),
            Err(k) => return trap(k),
        },
        Instruction::Store { src, base, offset } => match effective(r[base as usize], offset) {
            Ok(ea) => mem.write_u32(ea, r[src as usize]),
            Err(k) => return trap(k),
        },
        Instruction::Alu { op, rd, operand } => {
            let b = match operand {
                Operand::Reg(rs) => r[rs as usize],
                Operand::Imm(imm) => imm as u32,
            };
            match op.apply(r[rd as usize], b) {
                Some(v) => r[rd as usize] = v,
                None => return trap(ExceptKind::DivZero),
            }
        }
        Instruction::Branch { op, a, b, offset } => {
            let bv = b.map_or(0, |b| r[b as usize]);
            if op.taken(r[a as usize], bv) {
                match rel_target(pc, offset) {
                    Some(t) => {
                        regs.pc = t;
                        return None;
                    }
                    None => return trap(ExceptKind::Fault),
                }
            }
        }
        Instruction::Jmp { target } | Instruction::Jal { target, .. } => {
            let t = match target {
                Target::Rel(off) => match rel_target(pc, off) {
                    Some(t) => t,
                    None => return trap(ExceptKind::Fault),
                },
                Target::Reg(rs) => match indirect(r[rs as usize]) {
                    Ok(t) => t,
                    Err(k) => return trap(k),
                },
            };
            if let Instruction::Jal { link, .. } = inst {
                r[link as usize] = next;
            }
            regs.pc = t;
            return None;
        }
        Instruction::Sys => {
            regs.pc = next;
            return Some(StopReason::Syscall(SyscallRequest::decode(&regs.gpr)));
        }
        Instruction::Halt { code } => {
            let code = match code {
                Operand::Reg(rs) => r[rs as usize],
                Operand::Imm(imm) => imm as u32,
            };
            return Some(StopReason::Halt(code));
        }
    }
    regs.pc = next;
    None
}

/// Retires exactly one instruction, charging one unit of `fuel`.
///
/// With no fuel left nothing executes and `FuelOut` is returned. Otherwise
/// the result is `None` if the process keeps running, or the reason it
/// stopped (traps and `SYS` included; they consume their fuel unit too).
pub fn step(regs: &mut Registers, mem: &mut AddressSpace, fuel: &mut u64) -> Option<StopReason> {
    if *fuel == 0 {
        return Some(StopReason::FuelOut);
    }
    *fuel -= 1;
    execute(regs, mem)
}

/// Runs until the process stops or `fuel` instructions have retired.
pub fn run_until_stop(regs: &mut Registers, mem: &mut AddressSpace, fuel: u64) -> RunOutcome {
    let mut retired = 0u64;
    while retired < fuel {
        retired += 1;
        if let Some(stop) = execute(regs, mem) {
            return RunOutcome { retired, stop };
        }
    }
    RunOutcome {
        retired,
        stop: StopReason::FuelOut,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::{AluOp, BranchOp};

    fn load(code: &[Instruction]) -> (Registers, AddressSpace) {
        let mut mem = AddressSpace::new();
        for (i, inst) in code.iter().enumerate() {
            mem.write_u32(0x1000 + 4 * i as u32, inst.encode());
        }
        (
            Registers {
                pc: 0x1000,
                ..Default::default()
            },
            mem,
        )
    }

    #[test]
    fn loadi_sets_register_and_advances() {
        let (mut regs, mut mem) = load(&[Instruction::LoadI {
            rd: 1,
            imm: 5,
            high: false,
        }]);
        let mut fuel = 10;
        assert_eq!(step(&mut regs, &mut mem, &mut fuel), None);
        assert_eq!(regs.gpr[1], 5);
        assert_eq!(regs.pc, 0x1004);
        assert_eq!(fuel, 9);
    }

    #[test]
    fn divide_by_zero_traps_without_changing_registers() {
        let (mut regs, mut mem) = load(&[Instruction::Alu {
            op: AluOp::DivU,
            rd: 1,
            operand: Operand::Reg(2),
        }]);
        regs.gpr[1] = 10;
        let before = regs;
        let mut fuel = 1;
        assert_eq!(
            step(&mut regs, &mut mem, &mut fuel),
            Some(StopReason::Except(ExceptKind::DivZero))
        );
        assert_eq!(regs, before);
        assert_eq!(fuel, 0);
    }

    #[test]
    fn zero_fuel_retires_nothing() {
        let (mut regs, mut mem) = load(&[Instruction::Halt {
            code: Operand::Imm(0),
        }]);
        let mut fuel = 0;
        assert_eq!(
            step(&mut regs, &mut mem, &mut fuel),
            Some(StopReason::FuelOut)
        );
        assert_eq!(regs.pc, 0x1000);
    }

    #[test]
    fn halt_consumes_one_unit() {
        let (mut regs, mut mem) = load(&[Instruction::Halt {
            code: Operand::Imm(0),
        }]);
        let out = run_until_stop(&mut regs, &mut mem, 100);
        assert_eq!(out.retired, 1);
        assert_eq!(out.stop, StopReason::Halt(0));
    }

    #[test]
    fn misaligned_and_wrapping_accesses_trap() {
        let (mut regs, mut mem) = load(&[Instruction::Load {
            rd: 0,
            base: 1,
            offset: 2,
        }]);
        let out = run_until_stop(&mut regs, &mut mem, 1);
        assert_eq!(out.stop, StopReason::Except(ExceptKind::Misalign));

        let (mut regs, mut mem) = load(&[Instruction::Store {
            src: 0,
            base: 1,
            offset: -4,
        }]);
        let out = run_until_stop(&mut regs, &mut mem, 1);
        assert_eq!(out.stop, StopReason::Except(ExceptKind::Fault));
    }

    #[test]
    fn jal_links_before_jumping_through_same_register() {
        let (mut regs, mut mem) = load(&[Instruction::Jal {
            link: 3,
            target: Target::Reg(3),
        }]);
        regs.gpr[3] = 0x2000;
        run_until_stop(&mut regs, &mut mem, 1);
        assert_eq!(regs.pc, 0x2000);
        assert_eq!(regs.gpr[3], 0x1004);
    }

    #[test]
    fn fuel_exhaustion_mid_loop() {
        // r1 += 1; jmp back
        let (mut regs, mut mem) = load(&[
            Instruction::Alu {
                op: AluOp::Add,
                rd: 1,
                operand: Operand::Imm(1),
            },
            Instruction::Branch {
                op: BranchOp::Eq,
                a: 0,
                b: None,
                offset: -2,
            },
        ]);
        let out = run_until_stop(&mut regs, &mut mem, 1001);
        assert_eq!(out.stop, StopReason::FuelOut);
        assert_eq!(out.retired, 1001);
        assert_eq!(regs.gpr[1], 501);
    }
}
