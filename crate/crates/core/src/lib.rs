//! Numeric core of a non-attentive, non-autoregressive acoustic model for
//! text-to-speech: a small reverse-mode differentiation engine, the layer
//! primitives built on it, the dense-fuse text encoder, duration modelling
//! (predictor, GMM-attention extractor, length regulator), the recurrent
//! decoder with its CBHG postnet, and the training arithmetic.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, timing and the
//! command line live in the companion `nartts` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod corpus;
pub mod decoder;
pub mod duration;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod frames;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod postnet;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{GradStore, ParamBuilder, ParamId, ParamStore};
pub use rng::{RngStream, StreamKind};
pub use tensor::Tensor;
