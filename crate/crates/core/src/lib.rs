//! Siamese U-Net change detection for bitemporal burned-area mapping.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape with
//!   the handful of primitives the network needs, plus a finite-difference
//!   gradient checker.
//! * [`model`]: the shared-weight encoder, per-level feature differencing and
//!   the decoder that consumes the differences.
//! * [`loss`] and [`metrics`]: the weighted BCE + Dice training objective and
//!   confusion-matrix based evaluation.
//! * [`data`]: the bitemporal tile format, a synthetic scene generator, patch
//!   sampling and standardization.
//! * [`train`]: Adam, the training loop, checkpoints and thresholded prediction.

pub mod autodiff;
mod binio;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Mode, Var};
pub use data::{BitemporalTile, SceneParams};
pub use error::{Error, FormatError, Result};
pub use loss::{LossConfig, PosWeight};
pub use metrics::{ConfusionCounts, MetricSet};
pub use model::{ModelConfig, SiameseUNet};
pub use rng::Xoshiro256;
pub use tensor::{Scalar, Tensor};
pub use train::{Checkpoint, TrainConfig, TrainLog};
