//! Review-encoder plugins and ID-aligned rating prediction.
//!
//! The crate is organized in the order data flows through it:
//!
//! * [`textenc`] tokenizes reviews and encodes them with a small transformer
//!   whose projection matrices can carry low-rank adapters.
//! * [`adapters`] creates adapters, materializes their deltas and merges any
//!   number of them into a frozen encoder with drop-and-rescale.
//! * [`heads`] holds the ID embedding tables, the attention fusion of review
//!   embeddings into ID embeddings, the prediction MLPs and the losses.
//! * [`data`] loads and splits review corpora, indexes per-entity histories
//!   and generates synthetic multi-domain corpora.
//! * [`pipeline`] runs source pretraining, target training and evaluation.

pub mod adapters;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod format;
pub mod heads;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod textenc;

pub use error::{LoidError, Result};
