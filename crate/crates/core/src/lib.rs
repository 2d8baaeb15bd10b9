//! Information-theoretic adaptive tokenization at desk scale.
//!
//! The crate has two halves. The theory half ([`source`], [`code_tree`]) works on
//! finite distributions and prefix-code trees: Huffman codes, the reconstruction
//! loss a uniform length router induces on a code tree, and the ELBO-router bound.
//! The practical half ([`fsq`], [`router`], [`compressor`], [`model`], [`trainer`],
//! [`codec`]) is a small trainable tokenizer for 64-sample signals whose token
//! count is chosen per sample from its full-length reconstruction error.

pub mod code_tree;
pub mod codec;
pub mod compressor;
pub mod error;
pub mod fsq;
pub mod model;
pub mod router;
pub mod source;
pub mod stats;
pub mod trainer;

pub use code_tree::{CodeTree, DepthProfile, Objective, SearchMode, TreeNode};
pub use codec::TokenStream;
pub use compressor::TokenMask;
pub use error::{Error, Result, StreamError};
pub use fsq::{FsqConfig, TokenCode};
pub use model::{Model, ModelParams, NfeCounter};
pub use router::RouterState;
pub use source::{DiscreteSource, ToySignal};
pub use trainer::{RouterMode, TrainConfig};
