//! Desk-scale laboratory for merging a "visual" and a "reasoning" fine-tune
//! of a shared toy network.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`]: rank-1/2 f32 tensors with f64-accumulated reductions and a
//!   deterministic one-sided Jacobi SVD;
//! - [`mathx`] / [`rng`]: portable transcendentals and a specified xorshift64*
//!   generator, so seeded runs produce identical bytes on every platform;
//! - [`model`], [`task`], [`triple`], [`checkpoint`]: a 16→32→32→4 tanh MLP,
//!   synthetic labeled tasks, the base/visual/reasoning checkpoint triple,
//!   and the binary container format;
//! - [`merge`]: task-vector arithmetic and the baseline merge family
//!   (global/layer-wise arithmetic, trim-elect-merge, random-drop rescale,
//!   spectral-ratio coefficients, rank-injection sweeps);
//! - [`frism`]: per-layer SVD decomposition of the reasoning task vector with
//!   sigmoid-gated singular directions;
//! - [`trainer`]: label-free self-distillation training of the gates;
//! - [`spectral`]: the quadratic-curvature regime model (suppression vs
//!   injection), gate dynamics simulation, and curvature estimation on the
//!   real toy triple.

pub mod checkpoint;
pub mod error;
pub mod frism;
pub mod mathx;
pub mod merge;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod task;
pub mod tensor;
pub mod trainer;
pub mod triple;

pub use error::{Error, Result};
pub use frism::{FrismConfig, GateSet, SubspaceDecomposition, Variant};
pub use merge::TaskVector;
pub use model::{ArchSpec, ModelParams, Provenance};
pub use task::{Batch, SyntheticTask, TaskKind};
pub use tensor::{svd, truncate, SvdResult, Tensor};
pub use trainer::{Optimizer, TrainConfig, TrainReport};
pub use triple::{Epochs, Triple, TripleSeeds};
