//! Desk-scale speech-to-text, built from first principles and checked
//! against independent oracles at every numerical kernel.
//!
//! The pipeline: [`dsp`] turns audio into log-magnitude spectral features;
//! [`nn`] runs them through a deep bidirectional peephole-LSTM stack with
//! hand-derived backpropagation through time; [`ctc`] provides the
//! alignment-free loss; [`decode`] produces greedy and prefix-beam-search
//! n-best transcriptions; [`lm`] rescores them with a character language
//! model; [`train`] owns the deterministic SGD loop; [`corpus`] synthesizes
//! a reproducible tone-chord dataset so the whole system trains with no
//! external data.
//!
//! With the default `parallel` feature, embarrassingly parallel stages
//! (feature frames, per-parameter gradient checks, per-utterance
//! evaluation) run on rayon; results are bit-identical to the sequential
//! fallback because every parallel loop is an ordered, independent map.

pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod lm;
pub mod nn;
pub mod numeric;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
