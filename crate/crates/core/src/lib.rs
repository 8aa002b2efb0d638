//! Gaussian prototypical networks for few-shot image classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`adam`]: dense tensors, a small reverse-mode
//!   tape and the optimizer.
//! * [`encoder`]: the four-block convolutional encoder emitting an embedding
//!   and a raw covariance estimate per image.
//! * [`head`]: covariance transforms, covariance-weighted prototypes,
//!   distances, classification and the episode loss.
//! * [`data`]: Omniglot ingestion, preprocessing, rotation augmentation,
//!   down-sampling damage and the binary dataset cache.
//! * [`episodes`]: episode sampling, the learning-rate schedule and training.
//! * [`eval`]: k-shot evaluation, best-5 aggregation and figure exports.

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod runlog;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
