//! Relational representation learning at desk scale.
//!
//! Rows of a relational database are linearized together with their table
//! and column names, embedded by a small self-attention encoder, and combined
//! across rows and tables by a graph convolutional network over a
//! table/column/row schema graph. Pre-training reconstructs masked cell
//! values, column names and table names.

pub mod error;
pub mod graph;
pub mod nn;
pub mod parallel;
pub mod pretrain;
pub mod store;
pub mod synth;
pub mod tasks;
pub mod tokenizer;

pub use error::{Error, Result};
