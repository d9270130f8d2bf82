//! Reverse-mode automatic differentiation over channels-first feature maps.
//!
//! A [`Tape`] records every primitive executed during a forward pass along
//! with the activations its backward rule needs. [`Tape::backward`] then
//! walks the record in reverse and returns per-node gradients, which can be
//! accumulated into a [`ParamStore`].
//!
//! Everything is generic over [`Scalar`]: `f32` is the production precision
//! and `f64` is used for finite-difference verification ([`gradcheck`]).

mod exec;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub use exec::{exec_mode, set_exec_mode, with_exec_mode, ExecMode};
pub(crate) use exec::for_each_chunk_mut;
pub use gradcheck::{
    gradcheck, gradcheck_map, gradcheck_params, gradcheck_params_map, gradcheck_with,
    GradcheckOptions, GradcheckReport,
};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::lane_sum;

/// Real number type the tape can run in.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Default LeakyReLU negative slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;
