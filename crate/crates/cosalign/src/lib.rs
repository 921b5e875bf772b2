//! Class-wise cosine-similarity feature alignment for unsupervised domain
//! adaptation, on top of a self-contained reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense tensors, differentiable operators, gradient checking,
//!   and the binary tensor format.
//! - [`labelmap`] / [`imageio`] — class-id maps and Netpbm image I/O.
//! - [`net`] / [`optim`] — a small strided segmentation network and poly-decay
//!   SGD with momentum.
//! - [`align`] — the core method: class-wise feature splitting, a FIFO source
//!   feature dictionary, thresholded cosine-similarity losses.
//! - [`pseudolabel`] — confidence-percentile pseudo-label harvesting for the
//!   second training stage.
//! - [`adversarial`] — the output-space adversarial baseline.
//! - [`synthdata`] — a deterministic two-domain synthetic benchmark.
//! - [`metrics`] / [`checkpoint`] / [`config`] / [`trainer`] — evaluation,
//!   serialization, run configuration, and the training loop driving it all.

pub mod adversarial;
pub mod align;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod imageio;
pub mod labelmap;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pseudolabel;
pub mod real;
pub mod suite;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use real::{Real, Scalar};
pub use tensor::{Tensor, TensorError};
