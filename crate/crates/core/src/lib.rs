//! Hierarchical graph network for multi-hop question answering.
//!
//! The pipeline runs paragraph selection ([`selector`]) over an annotated
//! [`corpus`], builds a typed question/paragraph/sentence/entity graph
//! ([`graph`]), encodes the context ([`encoder`]), propagates over the graph
//! ([`reasoner`]) and predicts answers and supporting facts ([`predictor`]).
//! [`trainer`] wires it together and [`eval`] scores predictions.

pub mod numerics;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod reasoner;
pub mod selector;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
