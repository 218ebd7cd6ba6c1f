//! Desk-scale pipeline for long-video question answering with a small
//! decoder-only language model and an interactive visual adapter.
//!
//! The crate is organized around the dataflow: [`features`] produces synthetic
//! frame features, [`tokenizer`] turns them into video tokens, [`model`] hosts
//! the decoder with the [`adapter`] injected at scheduled layers, [`training`]
//! runs the two-stage procedure, and [`eval`] scores predictions. Everything
//! numeric sits on the reverse-mode [`tensor`] engine.

pub mod adapter;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{IvaError, Result};
