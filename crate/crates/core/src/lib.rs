//! Core of a joint page reader: a small reverse-mode differentiation engine,
//! the shared convolutional backbone with its feature pyramid, the detection,
//! transcription and entity-tagging branches, evaluation metrics and a
//! synthetic page generator.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature; IO, file formats and the command line live in the companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod ner;
pub mod param;
pub mod pipeline;
pub mod recog;
pub mod roi;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Conv2dSpec, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
