//! Differentiable-computation substrate: small dense tensors, a tape-based
//! autograd graph covering the ops the model needs, named parameter storage,
//! and an independent finite-difference oracle for verifying every analytic
//! gradient.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_vg, finite_diff_gradient, GradReport};
pub use graph::{Graph, NodeId};
pub use params::{Init, ParamEntry, ParamStore};
pub use tensor::Tensor;

/// Floating-point scalar the substrate is generic over. Training runs in
/// `f32`; gradient checking runs in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumCast
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to scalar")
    }
    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
