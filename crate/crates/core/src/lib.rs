//! Reverse-mode training of reversible transformer stacks.
//!
//! Three interchangeable backward strategies run over the same model:
//!
//! - [`EngineKind::Vanilla`] keeps every block's activations from the forward pass.
//! - [`EngineKind::Reprop`] keeps only stage boundaries and reconstructs each
//!   block's input from its output on the way back, one block at a time.
//! - [`EngineKind::Pareprop`] does the same reconstruction on a second lane,
//!   one block ahead of the gradient lane, so the two overlap.
//!
//! All three produce the same gradients; they differ in time and in the peak
//! activation bytes recorded by a [`MemoryLedger`].

pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod rev;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Rng, Scalar, Tensor};
pub use engine::{
    max_block_footprint, sgd_update, step, step_pareprop, step_pareprop_with, step_reprop, step_vanilla, EngineKind,
    GradStore, MemoryLedger, StepStats,
};
pub use model::{build_model, Batch, Model, ModelConfig, ModelKind};
