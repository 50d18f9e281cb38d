//! Dense `f64` tensors and tape-based reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: a flat [`Tensor`] type, an append-only
//! [`Tape`] whose builder methods record one operation each, named parameter
//! storage with trainable flags, bit-exact binary checkpoints, and a
//! finite-difference gradient checker that validates every operation's
//! backward rule. Everything is single-threaded and seeded; repeated runs
//! produce bit-identical values and gradients.

pub mod checkpoint;
mod conv;
mod error;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{
    relative_error, run_cases, standard_cases, Case, CaseReport, GradCheck,
};
pub use params::{FixedParams, ParamNodes, ParamStore, Parameter, StoreParams};
pub use tape::{Node, NodeId, Tape};
pub use tensor::{standard_normal, Tensor};
