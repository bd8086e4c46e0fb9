//! Driving-scenario clustering.
//!
//! Driving logs are rasterized into ego-centric bird's-eye images, compressed
//! by a convolutional frame codec, summarized per sequence by a recurrent
//! codec, and grouped with K-means. An augmentation-based evaluation scores a
//! clustering without ground-truth labels.

pub mod baseline;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod frame_codec;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod render;
pub mod sequence_codec;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/frame_codec.md")]
    mod frame_codec {}
    #[doc = include_str!("../../../book/src/sequence_codec.md")]
    mod sequence_codec {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/testing.md")]
    mod testing {}
}
