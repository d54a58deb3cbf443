//! Masked graph modeling on molecular graphs.
//!
//! The crate is organized bottom-up:
//!
//! - [`molgraph`]: graph model, SMILES-subset reader, corpus files
//! - [`fragment`]: functional groups, rings, cleavage and fragmentation recipes
//! - [`tokenize`]: node/edge/motif tokens and the frozen-GNN tokenizer
//! - [`sgt`]: the parameter-free simple GNN tokenizer
//! - [`tensorcore`]: a small reverse-mode autodiff tape over dense matrices
//! - [`nets`]: GIN and attention stacks, remask decoding, pooling
//! - [`pretrain`]: masking, targets, losses, Adam, checkpoints, training loop
//! - [`analyze`]: subtree census and linear probes
//! - [`gradcheck`]: finite-difference checks of every op and the full model
//! - [`cli`]: the `mgmlab` command line

pub mod analyze;
pub mod cli;
pub mod error;
pub mod fragment;
pub mod gradcheck;
pub(crate) mod io;
pub mod molgraph;
pub mod nets;
pub mod pretrain;
pub mod sgt;
pub mod tensorcore;
pub mod tokenize;

pub use error::{Error, Result};
