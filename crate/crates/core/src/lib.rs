//! Heterogeneous word/document text graphs with a dual-attention graph
//! classifier.
//!
//! The pipeline: [`corpus`] ingests and tokenizes labelled documents;
//! [`graph`] builds the PMI + TF-IDF text graph and samples fixed-fanout
//! k-hop neighborhoods; [`engine`] is a small reverse-mode differentiation
//! core; [`model`] implements the dual-attention layer (connection-attention
//! per hop, a fixed hop-coefficient mixture, multi-head concatenation) and
//! its plain-convolution ablation; [`train`] runs momentum-SGD training,
//! evaluation, the hop sweep, and the ablation comparison. [`synthetic`]
//! generates small labelled corpora for experiments.

pub mod corpus;
pub mod engine;
pub mod graph;
pub mod model;
pub mod synthetic;
pub mod train;
