pub mod bilm;
pub mod charcnn;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elmo;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod probes;
pub mod rng;
pub mod suite;
pub mod synth;
pub mod task;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// The book's chapters, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/language-model.md")]
    mod language_model {}
    #[doc = include_str!("../../../book/src/mixing.md")]
    mod mixing {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/tagging.md")]
    mod tagging {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
