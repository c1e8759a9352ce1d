//! Self-distillation pretraining that treats speech, vision and text the
//! same way: a student network sees a masked view of the input and regresses
//! normalized, layer-averaged representations that an EMA-tracked teacher
//! produced from the unmasked view.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors, reverse-mode autodiff, finite-difference oracle
//! - [`frontends`]: modality encoders (image patches, waveform convs, token embeddings)
//! - [`transformer`]: the shared encoder with per-block activation taps
//! - [`masking`]: block / span / token mask plans
//! - [`distill`]: EMA teacher, target construction, regression objective
//! - [`train`]: Adam, schedules, the step loop, collapse diagnostics
//! - [`eval`]: linear probes and ablation harnesses
//! - [`config`] / [`checkpoint`] / [`data`]: run description, serialization, datasets
//!
//! The `book/` directory of the repository walks through the same layers with
//! runnable snippets; those chapters compile as doctests of this crate.

pub mod elem;
pub mod error;
pub mod numerics;
pub mod rng;

pub use elem::{Dtype, Elem};
pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, TensorId};
