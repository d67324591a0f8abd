//! Fine-tuning autoregressive sequence policies as GFlowNets on small
//! verifiable reasoning tasks, alongside SFT, RFT, DPO and PPO baselines.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gflownet;
pub mod policy;
pub mod problem;
pub mod train;
pub mod util;
pub mod vocab;

pub use error::{Error, Result};
