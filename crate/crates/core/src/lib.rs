//! Data formulation, self-refinement and evaluation toolkit for
//! multimodal humor generation.

pub mod evalkit;
pub mod forge;
pub mod gateway;
pub mod ingest;
pub mod nouns;
pub mod jsonl;
pub mod refinery;
pub mod rng;
pub mod sidequests;
pub mod types;

pub use types::*;
