//! Next-step generation for goal-oriented procedural scripts.
//!
//! Given a task goal, an optional subgoal, and a history of (step, caption)
//! pairs, the library predicts the next step with a small encoder-decoder
//! that adds three gated mechanisms on top of a vanilla transformer:
//!
//! * a selective history encoder that can blend irrelevant step/caption
//!   segments toward a learned mask embedding (per-segment gate `alpha`),
//! * a bank of retrieved next-step candidates from the training corpus,
//!   encoded with the shared encoder and gated by `beta`,
//! * decoder layers that cross-attend over the retrieved bank through a
//!   per-position fusion gate `gamma`.
//!
//! Training combines token-level cross-entropy with a contrastive loss
//! over negative step candidates. Everything runs in double precision on
//! the CPU with exact analytic gradients; there are no pretrained weights.
//!
//! The crate also ships the evaluation-metric suite used to score
//! generations (BLEU, ROUGE-L, self-BLEU, distinct n-grams, history
//! overlap, Text@1) and a deterministic synthetic-corpus generator for
//! experiments and tests.

mod binio;
pub mod corpus;
mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};
