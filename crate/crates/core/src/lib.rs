//! Decoding-time mitigation of object hallucination for vision-language
//! models: entropy-based pruning of uninformative visual tokens, division of
//! the visually grounded next-token distribution by a language-prior
//! estimate, and early termination once generation stops relying on the
//! image. Ships with a deterministic toy model and a small evaluation
//! harness.

pub mod audit;
pub mod collapse;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod prob;
pub mod rectify;
pub mod toy;

pub use error::EvrbError;
