//! Differentiable substrate: parameter storage, the gradient tape, recurrent and
//! attention layers, the copy-augmented output distribution, dropout, gradient
//! checking and checkpoints.

pub mod checkpoint;
pub mod glove;
mod gradcheck;
mod layers;
mod params;
mod tape;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, GradEntry, REL_FLOOR};
pub use layers::*;
pub use params::{Gradients, Param, ParamId, ParameterSet};
pub use tape::{copy_log_dist, GruIds, StTrace, Tape, Var};
