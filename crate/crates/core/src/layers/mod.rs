//! Dynamic dense graph convolution blocks.
//!
//! Every layer has a tape form used by the model and training loop, and an
//! eager form (plain tensors in, tensor out) built on the same tape code.

mod factorized;
mod message;
mod slmp;

pub use factorized::{slmp_factorized_forward, FactorizedAdjacency, FactorizedParams};
pub use message::{aggregate, aggregate_masked, dynamic_weights, static_reduction_forward, update};
pub use slmp::{
    clmp_forward, ddgc_block_forward, slmp_forward, Activation, CrossLevelParams, LevelParams,
};
pub(crate) use slmp::{clmp_tape, slmp_tape, xavier, SlmpTape, SlmpVars};

pub use crate::kernels::PhiMode;
