//! Wound-region segmentation on the CPU: a reverse-mode autodiff engine, a
//! residual U-Net with channel and spatial attention, training with
//! pre-training on a related domain, and pixel-level evaluation.
//!
//! The guide under `book/` walks through each module; its code blocks run as
//! doctests of this crate.

pub mod augment;
pub mod cli;
pub mod model;
pub mod data_io;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod preprocess;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tensors.md")]
mod book_tensors {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/preprocessing.md")]
mod book_preprocessing {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/augmentation.md")]
mod book_augmentation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/model.md")]
mod book_model {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/metrics.md")]
mod book_metrics {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
mod book_data {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
