//! Neural attention memory laboratory.
//!
//! Building blocks, bottom up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode differentiation tape, Adam,
//!   and bit-exact checkpoints.
//! - [`memory`]: the outer-product memory matrix with its read/write
//!   primitives, in value form and as tape composites.
//! - [`lsam`]: a recurrent cell that replaces the LSTM cell state with a
//!   memory matrix, stackable and bidirectional.
//! - [`namtm`]: a differentiable tape machine whose tape is a memory matrix
//!   addressed by positional head vectors with left/right/no-op/jump moves.
//! - [`noa`]: normalized outer-product attention, a reference scaled
//!   dot-product attention, and a small encoder built on either.
//! - [`fewshot`]: classifier construction by memory writes, its cosine
//!   special case, and a trainable read/write gate.
//! - [`tasks`]: masked sequence-completion datasets (palindrome, fibonacci,
//!   reduce) with length-split generalization sets.
//! - [`harness`]: training loop, evaluation, benchmarks, and the CLI.

pub mod fewshot;
pub mod gradcheck;
pub mod harness;
pub mod lsam;
pub mod memory;
pub mod namtm;
pub mod noa;
pub mod tasks;
pub mod tensor;
