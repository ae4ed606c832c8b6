//! Desk-scale simulator for federated, text-conditioned prompt generation.
//!
//! Clients hold disjoint subsets of base classes and jointly train a
//! small cross-attention prompt generator with federated averaging. The
//! generator maps a class embedding to context vectors; a frozen text
//! head folds them into a text feature that is matched against image
//! features by cosine similarity. Evaluation reports accuracy on seen
//! (base) and unseen (new) classes.
//!
//! Module map:
//! - [`tensor`], [`autograd`]: dense `f64` tensors and reverse-mode AD
//! - [`translator`]: the prompt generator
//! - [`encoders`]: synthetic world, frozen text head, embedding tables
//! - [`partition`]: class-disjoint clients and few-shot datasets
//! - [`federation`]: SGD, client selection, FedAvg, the training loop
//! - [`eval`], [`report`]: accuracy, summaries, reference tables, charts
//! - [`config`], [`container`], [`checkpoint`], [`cli`]: runner plumbing

pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod container;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod federation;
pub mod params;
pub mod partition;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod translator;

pub use error::{Error, Result};
pub use params::{Parameter, ParameterSet};
pub use tensor::Tensor;
