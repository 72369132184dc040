//! Input-aware dynamic depth pruning for small decoder-only transformers.
//!
//! Calibration text is embedded and clustered; for every cluster a
//! hard-concrete gate vector over the model's attention and FFN blocks is
//! trained against a frozen model under a Lagrangian sparsity constraint.
//! At inference each input is routed to its nearest cluster centroid and the
//! model runs with that cluster's binary block mask.

// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod baselines;
pub mod embed;
pub mod error;
pub mod flops;
pub mod gates;
pub mod harness;
pub mod mask_trainer;
pub mod model;
pub mod router;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
