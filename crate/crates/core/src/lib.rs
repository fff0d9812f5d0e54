//! Reference engine for modality-aware permutation sparse attention.
//!
//! The crate is organised bottom-up: [`tensor`] holds the dense oracle and
//! the online-softmax partials, [`masks`] the sparse patterns and their
//! accounting, [`estimator`] the online pattern estimators, [`blocksparse`]
//! the tile executor with permutation support, [`modality`] the boundary
//! executors, [`search`] the offline pattern search, [`synth`] the synthetic
//! fixtures, and [`cli`] the command-line entry points.

pub mod blocksparse;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod masks;
pub mod modality;
pub mod search;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
