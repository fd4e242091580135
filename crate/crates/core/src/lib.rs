//! A determinism-enforcing execution stack: a guest instruction set with
//! exact fuel accounting, a kernel of shared-nothing hierarchical processes
//! that interact only through PUT/GET/RET, a guest runtime that rebuilds
//! shared memory and a shared file system on top of that kernel, and a job
//! gateway that turns every job into a pure function of its inputs.

pub mod fs;
pub mod gateway;
pub mod harness;
pub mod kernel;
pub mod runtime;
pub mod space;
pub mod vm;

pub use space::AddressSpace;
