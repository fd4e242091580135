//! Instruction set of the guest machine.
//!
//! Every instruction is one little-endian 32-bit word:
//!
//! ```text
//!  31            16 15    12 11     8 7        0
//! +----------------+--------+--------+----------+
//! |     imm16      |   rs   |   rd   |  opcode  |
//! +----------------+--------+--------+----------+
//! ```
//!
//! `rd` and `rs` name one of the eight general purpose registers. The value
//! `0xF` in the `rs` field means "no register": ALU instructions then take
//! `imm16` (zero-extended) as their second operand, branches compare against
//! zero, and `JMP`/`JAL`/`HALT` use the immediate form. Decoding is strict:
//! every word either decodes to exactly one [`Instruction`] whose encoding is
//! that same word, or it is illegal.

use std::fmt;

/// Value of the `rs` field meaning "immediate / zero operand".
pub const NO_REG: u8 = 0xF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    LoadI = 1,
    Load = 2,
    Store = 3,
    Add = 4,
    Sub = 5,
    Mul = 6,
    DivU = 7,
    And = 8,
    Or = 9,
    Xor = 10,
    Shl = 11,
    Shr = 12,
    Beq = 13,
    Bne = 14,
    BltU = 15,
    Jmp = 16,
    Jal = 17,
    Sys = 18,
    Halt = 19,
}

impl Opcode {
    pub fn from_byte(b: u8) -> Option<Opcode> {
        use Opcode::*;
        Some(match b {
            1 => LoadI,
            2 => Load,
            3 => Store,
            4 => Add,
            5 => Sub,
            6 => Mul,
            7 => DivU,
            8 => And,
            9 => Or,
            10 => Xor,
            11 => Shl,
            12 => Shr,
            13 => Beq,
            14 => Bne,
            15 => BltU,
            16 => Jmp,
            17 => Jal,
            18 => Sys,
            19 => Halt,
            _ => return None,
        })
    }

    pub fn mnemonic(self) -> &'static str {
        use Opcode::*;
        match self {
            LoadI => "loadi",
            Load => "load",
            Store => "store",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            DivU => "divu",
            And => "and",
            Or => "or",
            Xor => "xor",
            Shl => "shl",
            Shr => "shr",
            Beq => "beq",
            Bne => "bne",
            BltU => "bltu",
            Jmp => "jmp",
            Jal => "jal",
            Sys => "sys",
            Halt => "halt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    DivU,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl AluOp {
    pub const ALL: [AluOp; 9] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::DivU,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Shl,
        AluOp::Shr,
    ];

    pub fn opcode(self) -> Opcode {
        match self {
            AluOp::Add => Opcode::Add,
            AluOp::Sub => Opcode::Sub,
            AluOp::Mul => Opcode::Mul,
            AluOp::DivU => Opcode::DivU,
            AluOp::And => Opcode::And,
            AluOp::Or => Opcode::Or,
            AluOp::Xor => Opcode::Xor,
            AluOp::Shl => Opcode::Shl,
            AluOp::Shr => Opcode::Shr,
        }
    }

    /// `None` means division by zero.
    pub fn apply(self, a: u32, b: u32) -> Option<u32> {
        Some(match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::DivU => a.checked_div(b)?,
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.wrapping_shl(b & 31),
            AluOp::Shr => a.wrapping_shr(b & 31),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchOp {
    Eq,
    Ne,
    LtU,
}

impl BranchOp {
    pub fn opcode(self) -> Opcode {
        match self {
            BranchOp::Eq => Opcode::Beq,
            BranchOp::Ne => Opcode::Bne,
            BranchOp::LtU => Opcode::BltU,
        }
    }

    pub fn taken(self, a: u32, b: u32) -> bool {
        match self {
            BranchOp::Eq => a == b,
            BranchOp::Ne => a != b,
            BranchOp::LtU => a < b,
        }
    }
}

/// Second operand of an ALU instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(u8),
    Imm(u16),
}

/// Jump target: pc-relative word offset or register-indirect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Rel(i16),
    Reg(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    /// `rd = imm` (low) or `rd = (rd & 0xffff) | imm << 16` (high).
    LoadI { rd: u8, imm: u16, high: bool },
    Load { rd: u8, base: u8, offset: i16 },
    Store { src: u8, base: u8, offset: i16 },
    Alu { op: AluOp, rd: u8, operand: Operand },
    /// Compares `a` with `b` (`None` = zero); offset counts words from pc+4.
    Branch { op: BranchOp, a: u8, b: Option<u8>, offset: i16 },
    Jmp { target: Target },
    Jal { link: u8, target: Target },
    Sys,
    Halt { code: Operand },
}

#[inline]
fn pack(op: Opcode, rd: u8, rs: u8, imm: u16) -> u32 {
    op as u32 | (rd as u32) << 8 | (rs as u32) << 12 | (imm as u32) << 16
}

impl Instruction {
    pub fn encode(self) -> u32 {
        match self {
            Instruction::LoadI { rd, imm, high } => pack(Opcode::LoadI, rd, high as u8, imm),
            Instruction::Load { rd, base, offset } => pack(Opcode::Load, rd, base, offset as u16),
            Instruction::Store { src, base, offset } => {
                pack(Opcode::Store, src, base, offset as u16)
            }
            Instruction::Alu { op, rd, operand } => match operand {
                Operand::Reg(rs) => pack(op.opcode(), rd, rs, 0),
                Operand::Imm(imm) => pack(op.opcode(), rd, NO_REG, imm),
            },
            Instruction::Branch { op, a, b, offset } => {
                pack(op.opcode(), a, b.unwrap_or(NO_REG), offset as u16)
            }
            Instruction::Jmp { target } => match target {
                Target::Rel(off) => pack(Opcode::Jmp, 0, NO_REG, off as u16),
                Target::Reg(r) => pack(Opcode::Jmp, 0, r, 0),
            },
            Instruction::Jal { link, target } => match target {
                Target::Rel(off) => pack(Opcode::Jal, link, NO_REG, off as u16),
                Target::Reg(r) => pack(Opcode::Jal, link, r, 0),
            },
            Instruction::Sys => pack(Opcode::Sys, 0, 0, 0),
            Instruction::Halt { code } => match code {
                Operand::Imm(imm) => pack(Opcode::Halt, 0, NO_REG, imm),
                Operand::Reg(r) => pack(Opcode::Halt, 0, r, 0),
            },
        }
    }

    /// Strict decode; `None` for any word that is not the canonical encoding
    /// of some instruction.
    pub fn decode(word: u32) -> Option<Instruction> {
        let op = Opcode::from_byte(word as u8)?;
        let rd = ((word >> 8) & 0xF) as u8;
        let rs = ((word >> 12) & 0xF) as u8;
        let imm = (word >> 16) as u16;
        let gpr = |r: u8| r < 8;
        let alu = |op: AluOp| -> Option<Instruction> {
            if !gpr(rd) {
                return None;
            }
            let operand = if rs == NO_REG {
                Operand::Imm(imm)
            } else if gpr(rs) && imm == 0 {
                Operand::Reg(rs)
            } else {
                return None;
            };
            Some(Instruction::Alu { op, rd, operand })
        };
        let target = || -> Option<Target> {
            if rs == NO_REG {
                Some(Target::Rel(imm as i16))
            } else if gpr(rs) && imm == 0 {
                Some(Target::Reg(rs))
            } else {
                None
            }
        };
        let branch = |op: BranchOp| -> Option<Instruction> {
            if !gpr(rd) {
                return None;
            }
            let b = if rs == NO_REG {
                None
            } else if gpr(rs) {
                Some(rs)
            } else {
                return None;
            };
            Some(Instruction::Branch {
                op,
                a: rd,
                b,
                offset: imm as i16,
            })
        };
        match op {
            Opcode::LoadI if gpr(rd) && rs <= 1 => Some(Instruction::LoadI {
                rd,
                imm,
                high: rs == 1,
            }),
            Opcode::Load if gpr(rd) && gpr(rs) => Some(Instruction::Load {
                rd,
                base: rs,
                offset: imm as i16,
            }),
            Opcode::Store if gpr(rd) && gpr(rs) => Some(Instruction::Store {
                src: rd,
                base: rs,
                offset: imm as i16,
            }),
            Opcode::Add => alu(AluOp::Add),
            Opcode::Sub => alu(AluOp::Sub),
            Opcode::Mul => alu(AluOp::Mul),
            Opcode::DivU => alu(AluOp::DivU),
            Opcode::And => alu(AluOp::And),
            Opcode::Or => alu(AluOp::Or),
            Opcode::Xor => alu(AluOp::Xor),
            Opcode::Shl => alu(AluOp::Shl),
            Opcode::Shr => alu(AluOp::Shr),
            Opcode::Beq => branch(BranchOp::Eq),
            Opcode::Bne => branch(BranchOp::Ne),
            Opcode::BltU => branch(BranchOp::LtU),
            Opcode::Jmp if rd == 0 => target().map(|target| Instruction::Jmp { target }),
            Opcode::Jal if gpr(rd) => target().map(|target| Instruction::Jal { link: rd, target }),
            Opcode::Sys if word == pack(Opcode::Sys, 0, 0, 0) => Some(Instruction::Sys),
            Opcode::Halt if rd == 0 => {
                let code = if rs == NO_REG {
                    Operand::Imm(imm)
                } else if gpr(rs) && imm == 0 {
                    Operand::Reg(rs)
                } else {
                    return None;
                };
                Some(Instruction::Halt { code })
            }
            _ => None,
        }
    }
}

/// Formats one instruction in assembler syntax. `pc` is the address of the
/// instruction, used to print relative targets as absolute addresses.
pub fn format_instruction(inst: Instruction, pc: u32) -> String {
    let abs = |off: i16| -> String {
        let t = pc as i64 + 4 + off as i64 * 4;
        if t < 0 {
            format!("-{:#x}", -t)
        } else {
            format!("{t:#x}")
        }
    };
    match inst {
        Instruction::LoadI { rd, imm, high } => {
            let m = if high { "loadhi" } else { "loadi" };
            format!("{m} r{rd}, {imm:#x}")
        }
        Instruction::Load { rd, base, offset } => format!("load r{rd}, [r{base}{offset:+}]"),
        Instruction::Store { src, base, offset } => format!("store r{src}, [r{base}{offset:+}]"),
        Instruction::Alu { op, rd, operand } => {
            let m = op.opcode().mnemonic();
            match operand {
                Operand::Reg(rs) => format!("{m} r{rd}, r{rs}"),
                Operand::Imm(imm) => format!("{m} r{rd}, {imm:#x}"),
            }
        }
        Instruction::Branch { op, a, b, offset } => {
            let m = op.opcode().mnemonic();
            let b = b.map_or("zero".to_string(), |r| format!("r{r}"));
            format!("{m} r{a}, {b}, {}", abs(offset))
        }
        Instruction::Jmp { target } => match target {
            Target::Rel(off) => format!("jmp {}", abs(off)),
            Target::Reg(r) => format!("jmp r{r}"),
        },
        Instruction::Jal { link, target } => match target {
            Target::Rel(off) => format!("jal r{link}, {}", abs(off)),
            Target::Reg(r) => format!("jal r{link}, r{r}"),
        },
        Instruction::Sys => "sys".to_string(),
        Instruction::Halt { code } => match code {
            Operand::Imm(imm) => format!("halt {imm:#x}"),
            Operand::Reg(r) => format!("halt r{r}"),
        },
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_instruction(*self, 0))
    }
}
