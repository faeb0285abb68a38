//! Hierarchical product categorization: text normalization, corpus
//! handling, a small reverse-mode autodiff engine, BiLSTM and transformer
//! classifiers with four output heads, and the training loop around them.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embedding_io;
pub mod error;
pub mod exec;
pub mod losses_metrics;
pub mod models;
pub mod synthetic;
pub mod textnorm;
pub mod train;
pub mod vocab;

pub use error::{Error, ErrorClass, Result};
