//! Allocation-only core of the CASNET reinforcement-learning stack.
//!
//! Everything here is pure computation over `alloc` collections: a small
//! reverse-mode autodiff engine, recurrent policy building blocks, the planar
//! reacher environments, the morphology-independent CASNET policies and the
//! PPO / SAC optimizers. File formats, training orchestration and the CLI
//! live in the `casnet` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod algos;
pub mod autodiff;
pub mod casnet;
pub mod envs;
mod error;
pub(crate) mod math;
pub mod morphology;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
