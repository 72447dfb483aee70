//! Weather-aware crowd counting: synthetic data, a counting network with a
//! momentum key branch, class-balanced key memory, the training stages and
//! evaluation.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod multiqueue;
mod seeding;
pub mod trainer;

pub use error::{Error, Result};

/// Code blocks of the guide in `book/` run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
