//! Class-incremental semantic segmentation with a single reusable low-rank
//! adapter.
//!
//! The crate contains everything needed to run desk-scale continual
//! learning experiments on synthetic data:
//!
//! * [`tensor`]: dense tensors, a reverse-mode autodiff graph and SGD.
//! * [`nn`]: a small ViT-style segmentation network with parameter and MAC
//!   accounting.
//! * [`lora`]: low-rank adapters on the query/value projections, merge and
//!   reinitialisation.
//! * [`engine`]: task schedules, background-aware losses and the training
//!   modes.
//! * [`metrics`]: confusion matrices, mIoU, forget score, NetScore and
//!   Pareto fronts.
//! * [`data`]: synthetic dataset generation, PPM/PGM I/O and checkpoints.
//! * [`experiment`]: configuration, the end-to-end runner and report I/O
//!   used by the `clora` binary.
//!
//! The numeric code is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the experiment runner uses.

pub mod data;
pub mod engine;
mod error;
pub mod experiment;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod rng;
mod scalar;
pub mod tensor;

pub use error::{Error, ErrorKind, ParseErrorKind, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Sgd = tensor::Sgd<f64>;
pub type SegModel = nn::SegModel<f64>;
pub type AdapterSet = lora::AdapterSet<f64>;
pub type IncrementalState = engine::IncrementalState<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type SegModel32 = nn::SegModel<f32>;
