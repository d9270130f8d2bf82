//! Unsupervised deformable 3-D registration with a dual-stream
//! full-resolution residual network.
//!
//! The crate is organised bottom-up:
//!
//! - [`volgrid`]: volumes, label masks, displacement fields, file I/O and
//!   synthetic phantoms.
//! - [`autodiff`]: a reverse-mode tape over channels-first 4-D tensors.
//! - [`blocks`]: residual block, factorized convolution and the
//!   multi-scale residual block.
//! - [`network`]: the assembled two-stream network and its variants.
//! - [`stn`]: spatial-transformer warping.
//! - [`losses`]: MIND similarity and diffusion regularisation.
//! - [`optim`]: Adam, the training loop, the lambda grid search and
//!   checkpoints.
//! - [`metrics`]: Dice, average surface distance and Jacobian statistics.
//! - [`suite`]: the finite-difference gradient checks behind `gradcheck`.
//! - [`cli`]: the command-line surface used by the `f3rnet` binary.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod stn;
pub mod suite;
pub mod volgrid;

pub use autodiff::{ExecMode, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};
