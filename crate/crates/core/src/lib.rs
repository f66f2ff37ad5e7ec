// Comparisons like `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod augmentation;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mixup;
pub mod model;
pub mod optim;
pub mod prompting;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/prompts.md")]
pub mod book_prompts {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/augmentation.md")]
pub mod book_augmentation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/mixup.md")]
pub mod book_mixup {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
pub mod book_training {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod book_experiments {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod book_cli {}
