//! Reduced DenseNet-BC image classifier trained with a joint softmax and
//! center-loss objective, with the data pipeline, optimizer schedule and
//! evaluation metrics needed to train and score it.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! * [`nn`]: convolution, batch normalization, pooling, concatenation and
//!   fully connected layers.
//! * [`densenet`]: the three-block DenseNet-BC and its layer plan.
//! * [`losses`]: softmax cross-entropy, center loss and the center bank.
//! * [`trainer`]: SGD with momentum, the step schedule, the training loop
//!   and checkpoints.
//! * [`datapipe`]: manifests, stratified splits, balancing augmentation and
//!   preprocessing.
//! * [`evaluation`]: confusion matrices and balanced accuracy.

pub mod cli;
pub mod config;
pub mod datapipe;
pub mod dataset;
pub mod densenet;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/architecture.md")]
    struct Architecture;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
