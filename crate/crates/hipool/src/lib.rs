//! Hierarchical graph pooling for long-document classification.
//!
//! Documents are tokenized into overlapping fixed-length chunks, each chunk
//! embedded into one vector, and the chunk sequence treated as a chain graph.
//! Every pooling layer clusters nodes with a fixed sliding window, pools
//! cluster sums, adds cross-cluster attention, lifts the adjacency, and runs
//! a symmetric-normalized graph convolution. A column-wise aggregator
//! collapses the final nodes into a document vector for a linear classifier.
//!
//! Everything runs on a small 64-bit reverse-mode tape ([`tensor`]) whose
//! gradients are verified against central finite differences.

pub mod chunker;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
