//! Core library for a physical autoregressive model: a transformer that
//! interleaves a text prefix, per-step observation frames, and per-step
//! action chunks in one sequence, with diffusion heads decoding both
//! modalities and a KV cache driving closed-loop control.
//!
//! Everything is plain `f32` on the CPU; determinism is part of the
//! contract (fixed seeds give bitwise-identical training runs).

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod detok;
pub mod error;
pub mod graph;
mod io;
pub mod layout;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod verify;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
