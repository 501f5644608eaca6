//! Dense arrays, reverse-mode autodiff, and the AdamW optimizer.
//!
//! Compute is 32-bit float with 64-bit accumulation inside reductions.
//! Grids are value-semantic and freely shared across threads; a tape is
//! confined to the thread that records it.

pub mod adamw;
pub mod grid;
pub mod kernels;
pub mod tape;

pub use adamw::{AdamWConfig, AdamWState};
pub use grid::Grid;
pub use tape::{grad_check, record_and_backward, NodeId, Tape, TapeFn};
