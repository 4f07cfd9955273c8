//! A ZINC-style stack-machine VM with two execution engines.
//!
//! * [`interpreter`] decodes and executes bytecode directly, boxing every
//!   float result.
//! * [`jit`] compiles bytecode on demand into threaded code stored in a
//!   [`chunk_pool::ChunkPool`], patching each compiled instruction's opcode
//!   word in place with the location of its compiled form, and keeps
//!   intermediate results of consecutive float primitives unboxed.
//!
//! [`harness`] ties both together: the `zamjit` command line, the
//! differential tester and the benchmark runner.

pub mod bytecode;
pub mod chunk_pool;
pub mod harness;
pub mod interpreter;
pub mod jit;
pub mod ops;
pub mod runtime;

pub use bytecode::{assemble, disassemble, validate, Segment, SegmentId, BIAS};
pub use interpreter::{interpret, Outcome};
pub use jit::{Jit, JitConfig};
pub use runtime::{StatCounters, Value, Vm, VmConfig};
