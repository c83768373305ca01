pub mod assembler;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod lm;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tiler;
pub mod trainer;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tiling.md")]
    pub mod tiling {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    pub mod encoders {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    pub mod fusion {}
    #[doc = include_str!("../../../book/src/assembly.md")]
    pub mod assembly {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
