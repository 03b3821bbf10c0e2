//! Paired encoder-only / decoder-only transformer pretraining from a single
//! shared recipe.
//!
//! The two architectures share every weight shape and every batch of data;
//! they differ only in the attention mask ([`model::AttentionMode`]) and the
//! training objective ([`objectives::ObjectiveKind`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod recipe;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
