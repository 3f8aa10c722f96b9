//! Depression detection from acoustic and textual feature sequences, with
//! an extractor of acoustic-textual emotion inconsistency (ATEI).
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`graph`]), transformer encoders ([`encoder`]), the cross-attention
//! inconsistency extractor ([`atei`]), fusion and joint training
//! ([`fusion`]), data handling ([`data`]) and evaluation ([`eval`]).

pub mod atei;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod history;
pub mod labels;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Scalar, Tensor};
