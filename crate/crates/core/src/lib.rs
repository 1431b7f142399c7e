//! Temporal knowledge graph reasoning with a pair of prefix-tuned text
//! encoders trained contrastively.

pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod evaluator;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthetic;
pub mod tkg;
pub mod trainer;
pub mod verbalizer;
