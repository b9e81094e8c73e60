//! Conditional-GAN map→aerial translation: a from-scratch autodiff tape,
//! U-Net generator, PatchGAN discriminator, training loop and CLI.

// `!(x >= 0.0)` is used on purpose so NaN arguments are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod imgio;
pub mod ndtensor;
pub mod netdisc;
pub mod netgen;
pub mod pipeline;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/gradient-checks.md")]
    struct GradientChecks;
    #[doc = include_str!("../../../book/src/data-format.md")]
    struct DataFormat;
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    struct Preprocessing;
    #[doc = include_str!("../../../book/src/networks.md")]
    struct Networks;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
