//! The deterministic guest machine: 32-bit words, eight registers, exact
//! instruction counting. Nothing in the instruction set reads a clock, a
//! random source, or any other host state.

pub mod abi;
pub mod asm;
pub mod interp;
pub mod isa;
pub mod program;

pub use abi::{Options, SyscallRequest, Transfer};
pub use asm::{assemble, disassemble, AsmError, AsmErrorKind};
pub use interp::{run_until_stop, step, ExceptKind, Registers, RunOutcome, StopReason};
pub use isa::Instruction;
pub use program::{GuestProgram, ProgramError, CODE_BASE};
