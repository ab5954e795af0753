//! Desk-scale laboratory for meta-learned soft prompt initialization.
//!
//! The pipeline: pseudo-label an unlabeled pool with a tuned annotator,
//! cluster the pool into auxiliary tasks, meta-train a soft prompt over a
//! frozen mini transformer, then adapt and evaluate few-shot downstream.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod metatrain;
pub mod model;
pub mod taskgen;
pub(crate) mod util;

pub use error::{Error, Result};
