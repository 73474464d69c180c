//! Convolutional networks whose 3-D filters are outer products of three 1-D
//! vectors, with the tooling to train them on a CPU and to study the rank of
//! their outputs.
//!
//! ```
//! use rank1cnn::rank1::Rank1Filter;
//!
//! let mut f = Rank1Filter::from_slices(&[1.0, 2.0, 1.0], &[1.0, 0.0, -1.0], &[0.5, 0.5])?;
//! assert_eq!(f.compose().shape(), &[2, 3, 3]);
//! assert_eq!(f.param_count().factored, 8);
//! # Ok::<(), rank1cnn::Error>(())
//! ```
//!
//! The guide in `book/` walks through each module; its code samples are
//! compiled as doc-tests of this crate.

pub mod data;
pub mod error;
pub mod hankel;
pub mod layers;
pub mod network;
pub mod rank1;
pub mod svd;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rank1-filters.md")]
    mod rank1_filters {}
    #[doc = include_str!("../../../book/src/separable-convolution.md")]
    mod separable_convolution {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/hankel.md")]
    mod hankel {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
