//! Measure how much spelling information token embeddings carry.
//!
//! The core pipeline trains a character-level transformer decoder to spell
//! out a token given nothing but the token's (frozen) embedding vector,
//! then scores greedy decodes on held-out tokens with EM / chrF /
//! Levenshtein ratio. The reverse direction (training embeddings so they
//! encode spelling) and a toy masked-LM comparison harness are included.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mlm;
pub mod nn;
pub mod probe;
pub mod seeding;
pub mod splits;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
