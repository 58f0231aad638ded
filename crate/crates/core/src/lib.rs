//! Latent belief state dialog modeling: a task-oriented dialog system whose belief
//! states are discrete latent variables, trainable from fully labeled, partially
//! labeled and unlabeled dialogs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corpus;
pub mod error;
pub mod eval;
pub mod kb;
pub mod model;
pub mod neural;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
