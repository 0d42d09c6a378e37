//! Debiasing by undecided learning.
//!
//! Perturbation operators build biased views of every training input
//! (shuffled tokens, dropped constituents, dropped token fractions,
//! truncated encoders, zeroed representations). Each view is classified by
//! its own branch head on a shared encoder, and a supervised contrastive
//! objective pulls those predictions toward a fixed uniform "dummy" while
//! the intact prediction stays confident. Product-of-experts and debiased
//! focal fusion are available as alternatives.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`])
//! and a synthetic shortcut-injection benchmark ([`datagen`]).

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod perturb;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Segment, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
