//! Predictive-coding masked language model.
//!
//! A small transformer masked-LM whose per-layer sentence representations are
//! predicted forward in time by a layer-shared top-down GRU pathway, trained
//! jointly with a contrastive next-sentence objective and masked-LM
//! cross-entropy, plus a frozen-embedding probing and retrieval harness.
//!
//! - [`tensor`] — dense f64 tensors with a reverse-mode differentiation graph
//! - [`corpus`] — ingestion, vocabulary, overlapping sentence groups, masking
//! - [`params`] — named parameter store shared by encoder and pathway
//! - [`encoder`] — transformer encoder with per-layer `[CLS]` extraction
//! - [`pcnet`] — top-down context recurrence, latent prediction, rollout
//! - [`objective`] — contrastive (InfoNCE) and masked-LM losses
//! - [`trainer`] — joint optimization, Adam with decoupled weight decay,
//!   checkpointing with a training/inference parameter split
//! - [`probe`] — frozen-embedding probes and cosine retrieval
//! - [`config`] — run configuration: flat key/value files plus overrides

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod objective;
pub mod params;
pub mod pcnet;
pub mod probe;
pub mod tensor;
pub mod trainer;

pub use params::ParamStore;
pub use tensor::{Graph, Tensor, Var};
