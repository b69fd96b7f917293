//! Channel-attention building blocks and the CIFAR-10 models they plug into.
//!
//! Everything here is `no_std` + `alloc`. File formats, the CLI and the
//! wall clock live in the `chanatt` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod bench;
pub mod data;
pub mod models;
pub mod profiler;
pub mod tensor;
pub mod trainer;

pub use attention::{AttentionKind, AttentionSpec};
pub use models::{Arch, ModelConfig, ModelGraph};
